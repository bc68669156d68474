"""Command-line entry point.

Subcommands: simulate, estimate, bootstrap, diagnose, counterfactual.
All artifacts of a run are computed first and then published together, so
a failing run leaves no partial output. Failures print one JSON record to
stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import MODES, RunConfig, load_config, parse_window
from .counterfactual import reform_table
from .dataset import COVARIATE_COLUMNS, Dataset, dataset_text, read_dataset
from .errors import ConfigurationError, WelfareMTEError
from .estimation import fit_pipeline
from .inference import (
    block_bootstrap,
    default_workers,
    falsification_run,
    gcv_select,
    gps_balance,
    homogeneity_test,
    segment_f_stats,
)
from .probit import prepare
from .report import csv_text, curve_csv, curve_svg, publish
from .structural import population_moments, simulate_population, true_mte_curve

DIAG_HEADER = ["diagnostic", "item", "statistic", "value"]


class StageError(Exception):
    def __init__(self, stage, exc, rows=None):
        super().__init__(str(exc))
        self.stage, self.exc, self.rows = stage, exc, rows

    def record(self) -> dict:
        return {
            "status": "error",
            "stage": self.stage,
            "error": type(self.exc).__name__,
            "message": str(self.exc),
            "rows": self.rows,
        }


@contextmanager
def stage(name, rows=None):
    try:
        yield
    except StageError:
        raise
    except (WelfareMTEError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc, rows) from exc


# ---------------------------------------------------------------------------
# pipeline pieces


def _load_input(cfg: RunConfig, path=None) -> Dataset:
    path = path or cfg.input
    if path is None:
        raise StageError("read", ConfigurationError("no input dataset given (use --input or 'input:' in the config)"))
    with stage("read"):
        return read_dataset(cfg.resolve(path))


def _estimate(cfg: RunConfig, data: Dataset):
    with stage("estimate", data.n):
        return fit_pipeline(data, cfg.estimator)


def _base_artifacts(cfg: RunConfig, fit, curve) -> tuple[dict, list]:
    fs, ss = fit.first_stage, fit.second_stage
    arts = {
        "mte_curve.csv": curve_csv(curve),
        "first_stage.csv": csv_text(["term", "block", "coef", "se"], fs.table()),
        "second_stage.csv": csv_text(
            ["term", "block", "coef", "centering"],
            [dict(r, centering=ss.centering.get(r["term"].split("~")[0]) if r["block"] == "lambda" else None)
             for r in ss.table()],
        ),
    }
    if cfg.plot:
        arts["mte_curve.svg"] = curve_svg(curve)
    d = fit.data
    diag = [
        ("sample", "rows", "n", d.n),
        ("sample", "clusters", "n", len(np.unique(d["cluster_id"]))),
        ("sample", "participates", "share", float(np.mean(d["participates"]))),
        ("wages", fit.wage_model.mode, "workers", fit.wage_model.n_workers),
        ("wages", fit.wage_model.mode, "fallback", 1 if fit.wage_model.flags.get("fallback") else 0),
        ("first_stage", "probit", "loglik", fs.loglik),
        ("first_stage", "probit", "iterations", fs.iterations),
        ("first_stage", "probit", "max_abs_score", fs.grad_norm),
        ("first_stage", "fhat", "min", float(np.min(fit.fhat))),
        ("first_stage", "fhat", "max", float(np.max(fit.fhat))),
        ("first_stage", "fhat", "share_in_window",
         float(np.mean((fit.fhat >= cfg.estimator.window[0]) & (fit.fhat <= cfg.estimator.window[1])))),
        ("second_stage", "spline", "knots", len(ss.basis.knots)),
        ("second_stage", "spline", "window_lo", cfg.estimator.window[0]),
        ("second_stage", "spline", "window_hi", cfg.estimator.window[1]),
        ("second_stage", "fit", "rss", ss.rss),
        ("second_stage", "fit", "sigma2", ss.sigma2),
        ("constant_response", "F", "estimate", fit.iv.effect),
        ("constant_response", "F", "cluster_se", fit.iv.se),
    ]
    for j, k in enumerate(ss.basis.knots):
        diag.append(("second_stage", f"knot{j + 1}", "position", k))
    if fs.index_weights is not None:
        for c, w in zip(fs.index_columns, fs.index_weights):
            diag.append(("first_stage", f"index_weight:{c}", "weight", float(w)))
    return arts, diag


def _bootstrap(cfg: RunConfig, data: Dataset, fit):
    with stage("bootstrap", data.n):
        return block_bootstrap(data, cfg.estimator, B=cfg.boot, seed=cfg.seed, estimate=fit)


def _bootstrap_diag(boot) -> list:
    rows = [
        ("bootstrap", "replicates", "requested", boot.B),
        ("bootstrap", "replicates", "ok", boot.n_ok),
        ("bootstrap", "replicates", "failed", len(boot.failures)),
        ("constant_response", "F", "bootstrap_se", boot.iv_se),
    ]
    c = boot.curve
    if "point_outside_band_share" in c.flags:
        rows.append(("bootstrap", "band", "point_outside_share", c.flags["point_outside_band_share"]))
    if boot.n_ok >= 2:
        h = homogeneity_test(boot)
        rows += [
            ("homogeneity", "g_prime_sup_t", "statistic", h.statistic),
            ("homogeneity", "g_prime_sup_t", "critical_value", h.critical_value),
            ("homogeneity", "g_prime_sup_t", "p_value", h.p_value),
            ("homogeneity", "g_prime_sup_t", "reject", int(h.reject)),
        ]
    for i, reason in boot.failures[:20]:
        rows.append(("bootstrap", f"failure:{i}", "reason", reason))
    return rows


def _diagnose_rows(cfg: RunConfig, fit) -> list:
    rows = []
    est = cfg.estimator
    d = prepare(fit.data, fit.first_stage)
    with stage("segment_f", d.n):
        for seg in cfg.segments:
            s = segment_f_stats(d, fit.fhat, est.x_terms, est.z_terms, breaks=seg)
            for r in s.rows:
                item = f"{s.segmentation}:{r['segment']}"
                for key in ("lo", "hi", "n", "df1", "df2", "F"):
                    rows.append(("segment_f", item, key, r[key]))
                if r["flag"]:
                    rows.append(("segment_f", item, "flag", r["flag"]))
    with stage("gcv", d.n):
        g = gcv_select(fit.data, fit.fhat, cfg.knot_candidates, config=est)
        for r in g.rows:
            for key in ("rss", "p", "gcv"):
                rows.append(("gcv", f"J={r['J']}", key, r[key]))
            if r["skipped"]:
                rows.append(("gcv", f"J={r['J']}", "skipped", r["skipped"]))
        rows.append(("gcv", "selected", "J", g.selected))
    cols = cfg.balance_instruments or tuple(fit.first_stage.index_columns) or tuple(d.instrument_names)
    x_cols = [c for c in COVARIATE_COLUMNS if c in d]
    with stage("gps_balance", d.n):
        for z in cols:
            b = gps_balance(d, f"log_{z}", x_cols, degree=cfg.gps_degree)
            rows += [
                ("gps_balance", z, "tests", b.n_tests),
                ("gps_balance", z, "significant_before", b.significant_before),
                ("gps_balance", z, "significant_after", b.significant_after),
            ]
    return rows


def _diag_csv(rows) -> str:
    return csv_text(DIAG_HEADER, rows)


def run(cfg: RunConfig) -> list[Path]:
    """Execute ``cfg.mode`` and publish its artifacts into ``cfg.output``."""
    mode = cfg.mode
    out = cfg.resolve(cfg.output).resolve()
    if mode == "simulate":
        if cfg.population is None:
            raise StageError("simulate", ConfigurationError("simulate needs a 'population' section in the config"))
        spec = cfg.population
        with stage("simulate"):
            data = simulate_population(spec)
            mom = population_moments(data=data)
        arts = {"dataset.csv": dataset_text(data)}
        diag = [
            ("population", "agents", "n", mom.n),
            ("population", "participation", "rate", mom.participation_rate),
            ("population", "treatment_on_treated", "hours", mom.tot),
            ("population", "mean_effect", "hours", mom.mean_effect),
        ]
        try:
            with stage("oracle"):
                orc = true_mte_curve(spec, cfg.estimator.grid, seed=cfg.seed)
            arts["true_mte.csv"] = csv_text(["F", "mte"], zip(orc.grid, orc.mte))
        except StageError as exc:
            diag.append(("oracle", "true_mte", "skipped", str(exc.exc)))
        arts["diagnostics.csv"] = _diag_csv(diag)
        with stage("write"):
            return publish(arts, out)

    data = _load_input(cfg)
    fit = _estimate(cfg, data)
    curve = fit.curve
    boot = None
    extra = []
    if mode in ("bootstrap", "counterfactual") and cfg.boot > 0:
        boot = _bootstrap(cfg, data, fit)
        curve = boot.curve
        extra += _bootstrap_diag(boot)
    arts, diag = _base_artifacts(cfg, fit, curve)
    if mode == "diagnose":
        extra += _diagnose_rows(cfg, fit)
        if cfg.ineligible_input is not None:
            inel = _load_input(cfg, cfg.ineligible_input)
            with stage("falsification", inel.n):
                fc = falsification_run(data, inel, cfg.estimator, B=cfg.boot, seed=cfg.seed)
            arts["falsification_curve.csv"] = curve_csv(fc)
    if mode == "counterfactual":
        if not cfg.scenarios:
            raise StageError("counterfactual", ConfigurationError("counterfactual needs a 'scenarios' list in the config"))
        with stage("counterfactual", fit.data.n):
            table = reform_table(fit.first_stage, fit.second_stage, fit.data, cfg.scenarios, boot)
        arts["reform_table.csv"] = csv_text(
            ["scenario", "base_p", "dp_demographics", "dp_program", "dp_residual", "p_target", "mte", "lo95", "hi95"],
            table,
        )
    arts["diagnostics.csv"] = _diag_csv(diag + extra)
    with stage("write"):
        return publish(arts, out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="welfare-mte", description="Marginal hours responses to welfare participation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--input", help="input dataset CSV (overrides the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--knots", type=int)
    p.add_argument("--window", help="support window LO:HI")
    p.add_argument("--boot", type=int, help="bootstrap replicates")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = load_config(args.config) if args.config else RunConfig()
            cfg = cfg.with_overrides(
                mode=args.mode, seed=args.seed, output=args.out, knots=args.knots,
                window=parse_window(args.window) if args.window else None, boot=args.boot,
                input=Path(args.input).resolve() if args.input else None,
            )
            if args.out:
                cfg.output = Path(args.out).resolve()
            default_workers()
        except WelfareMTEError as exc:
            raise StageError("config", exc) from exc
        written = run(cfg)
    except StageError as exc:
        print(json.dumps(exc.record(), sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "mode": args.mode, "artifacts": [str(p) for p in written]}, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
