"""Bootstrap inference and first-stage / balance diagnostics."""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from .curves import MTECurve
from .dataset import COVARIATE_COLUMNS, Dataset
from .design import check_rank, design_matrix, term_values
from .errors import (
    BootstrapAbortError,
    InvalidInputError,
    RankDeficiencyError,
    SchemaError,
    WelfareMTEError,
)
from .estimation import (
    PipelineConfig,
    PipelineFit,
    fit_first_stage,
    fit_pipeline,
    impute_wages,
    mte_curve,
    second_stage_fit,
    wage_fit,
)
from .probit import probit_predict
from .spline import SplineBasis

MIN_BAND_REPLICATES = 50
MAX_FAILURE_SHARE = 0.2
WORKERS_ENV = "WELFARE_MTE_WORKERS"


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidInputError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# cluster resampling


class ClusterSampler:
    """Draws cluster-bootstrap replicates of one or more aligned datasets.

    Resampled clusters are relabeled ``0..G-1`` so a cluster drawn twice
    counts as two clusters downstream.
    """

    def __init__(self, *datasets: Dataset):
        ids = np.unique(np.concatenate([d.cluster_ids() for d in datasets]))
        self.ids = ids
        self.datasets = datasets
        self.rows = []
        for d in datasets:
            cid = d.cluster_ids()
            order = np.argsort(cid, kind="stable")
            starts = np.searchsorted(cid[order], ids, side="left")
            stops = np.searchsorted(cid[order], ids, side="right")
            self.rows.append([order[a:b] for a, b in zip(starts, stops)])

    @property
    def n_clusters(self) -> int:
        return self.ids.shape[0]

    def draw(self, rng: np.random.Generator):
        pick = rng.integers(0, self.n_clusters, size=self.n_clusters)
        out = []
        for d, rows in zip(self.datasets, self.rows):
            parts = [rows[k] for k in pick]
            idx = np.concatenate(parts) if parts else np.array([], dtype=int)
            label = np.repeat(np.arange(self.n_clusters, dtype=np.float64), [len(p) for p in parts])
            out.append(d.take(idx).with_columns({"cluster_id": label}))
        return out


def replicate_seeds(seed: int, B: int):
    return np.random.SeedSequence(seed).spawn(B)


# worker-process state, set once per pool
_STATE: dict = {}


def _init_worker(state):
    _STATE.clear()
    _STATE.update(state)


def _run_tasks(fn, state, seeds, workers):
    if workers <= 1 or len(seeds) <= 1:
        _init_worker(state)
        return [fn(s) for s in seeds]
    chunk = max(1, len(seeds) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(state,)) as ex:
        return list(ex.map(fn, seeds, chunksize=chunk))


def _pipeline_replicate(seq):
    sampler, config, start = _STATE["sampler"], _STATE["config"], _STATE["start"]
    (rep,) = sampler.draw(np.random.default_rng(seq))
    try:
        fit = fit_pipeline(rep, config, start=start)
    except (WelfareMTEError, linalg.LinAlgError, FloatingPointError) as exc:
        return {"ok": False, "reason": f"{type(exc).__name__}: {exc}"}
    ss = fit.second_stage
    return {
        "ok": True,
        "mte": fit.curve.mte,
        "g_prime": fit.g_prime,
        "iv": fit.iv.effect,
        "coef": ss.coef,
        "centering": ss.centering,
    }


@dataclass
class BootstrapResult:
    """Replicate curves on a fixed grid plus percentile bands.

    ``lo``/``hi`` are ``None`` when fewer than 50 replicates succeeded.
    """

    B: int
    grid: np.ndarray
    estimate: PipelineFit
    curves: np.ndarray
    g_prime: np.ndarray
    iv: np.ndarray
    coefs: np.ndarray
    centerings: list
    lo: np.ndarray | None
    hi: np.ndarray | None
    failures: list = field(default_factory=list)

    @property
    def n_ok(self) -> int:
        return self.curves.shape[0]

    @property
    def iv_se(self) -> float:
        return float(np.std(self.iv, ddof=1)) if self.n_ok > 1 else float("nan")

    @property
    def curve(self) -> MTECurve:
        c = self.estimate.curve
        out = MTECurve(c.grid, c.mte, self.lo, self.hi, c.window, c.x_at, c.label, dict(c.flags))
        if self.lo is not None:
            outside = (c.mte < self.lo) | (c.mte > self.hi)
            out.flags["point_outside_band_share"] = float(outside.mean())
        out.flags["replicates_ok"] = self.n_ok
        out.flags["replicates_failed"] = len(self.failures)
        return out

    def replicate_models(self):
        """Second-stage models rebuilt from stored replicate coefficients."""
        base = self.estimate.second_stage
        out = []
        for coef, cen in zip(self.coefs, self.centerings):
            m = _copy_model(base)
            m.coef = coef
            m.centering = cen
            out.append(m)
        return out


def _copy_model(model):
    from dataclasses import replace

    return replace(model)


def percentile_band(reps: np.ndarray, level: float = 0.95):
    a = (1 - level) / 2
    return np.quantile(reps, a, axis=0), np.quantile(reps, 1 - a, axis=0)


def _collect(results, B):
    ok = [r for r in results if r["ok"]]
    failures = [(i, r["reason"]) for i, r in enumerate(results) if not r["ok"]]
    if len(failures) > MAX_FAILURE_SHARE * B:
        reasons = sorted({r for _, r in failures})[:5]
        raise BootstrapAbortError(
            f"{len(failures)} of {B} bootstrap replicates failed (> {MAX_FAILURE_SHARE:.0%}); "
            f"first reasons: {reasons}"
        )
    return ok, failures


def block_bootstrap(data: Dataset, config: PipelineConfig | None = None, B: int = 500, seed: int = 0,
                    workers: int | None = None, estimate: PipelineFit | None = None) -> BootstrapResult:
    """State-level block bootstrap of the whole pipeline.

    Every replicate reruns wage fit, imputation, instrument index, probit
    and second stage. Replicate ``b`` uses the ``b``-th child of
    ``SeedSequence(seed)``, so the result does not depend on ``workers``.
    Failed replicates are dropped and recorded; more than 20% failures
    aborts.
    """
    if B < 1:
        raise InvalidInputError("B must be >= 1")
    if "cluster_id" not in data:
        raise SchemaError("block bootstrap needs a cluster_id column")
    config = config or PipelineConfig()
    workers = default_workers() if workers is None else workers
    data = data.without_oracle()
    est = estimate or fit_pipeline(data, config)
    state = {"sampler": ClusterSampler(data), "config": config, "start": est.first_stage.coef}
    results = _run_tasks(_pipeline_replicate, state, replicate_seeds(seed, B), workers)
    ok, failures = _collect(results, B)
    k = len(est.curve.grid)
    curves = np.array([r["mte"] for r in ok]).reshape(-1, k)
    gp = np.array([r["g_prime"] for r in ok]).reshape(-1, k)
    iv = np.array([r["iv"] for r in ok])
    coefs = np.array([r["coef"] for r in ok]).reshape(len(ok), -1)
    lo = hi = None
    if len(ok) >= MIN_BAND_REPLICATES:
        lo, hi = percentile_band(curves)
    return BootstrapResult(B, est.curve.grid, est, curves, gp, iv, coefs, [r["centering"] for r in ok], lo, hi, failures)


# ---------------------------------------------------------------------------
# homogeneity


@dataclass
class HomogeneityTest:
    statistic: float
    critical_value: float
    reject: bool
    p_value: float
    level: float


def homogeneity_test(boot: BootstrapResult, level: float = 0.05) -> HomogeneityTest:
    """Joint test that ``g`` is constant over the window (``g' = 0``).

    Builds a simultaneous (sup-t) bootstrap band for ``g'`` on the grid and
    rejects when zero leaves the band anywhere.
    """
    if boot.n_ok < 2:
        raise InvalidInputError("homogeneity test needs at least two bootstrap replicates")
    est = boot.estimate.g_prime
    reps = boot.g_prime
    sd = np.std(reps, axis=0, ddof=1)
    scale = np.where(sd > 0, sd, np.inf)
    t_boot = np.max(np.abs(reps - est) / scale, axis=1)
    stat = float(np.max(np.abs(est) / scale))
    if not np.any(sd > 0):
        stat = np.inf if np.any(est != 0) else 0.0
    crit = float(np.quantile(t_boot, 1 - level))
    p = float((1 + np.sum(t_boot >= stat)) / (1 + t_boot.shape[0]))
    return HomogeneityTest(stat, crit, bool(stat > crit), p, level)


# ---------------------------------------------------------------------------
# GCV


@dataclass
class GcvReport:
    rows: list[dict]
    selected: int

    def table(self) -> list[dict]:
        return list(self.rows)


def gcv_score(rss: float, n: int, p: int) -> float:
    """``(RSS/n) / (1 - p/n)**2``."""
    if p >= n:
        raise InvalidInputError(f"GCV undefined for p={p} >= n={n}")
    return (rss / n) / (1.0 - p / n) ** 2


def gcv_select(data: Dataset, fhat, candidates=(3, 4, 5, 6), x_beta_cols=None, x_lambda_cols=None, window=None,
               config: PipelineConfig | None = None) -> GcvReport:
    """Knot count minimizing the GCV score of the second stage."""
    config = config or PipelineConfig()
    beta = config.beta_terms if x_beta_cols is None else x_beta_cols
    lam = config.lambda_terms if x_lambda_cols is None else x_lambda_cols
    window = config.window if window is None else window
    rows = []
    for J in candidates:
        basis = SplineBasis.equally_spaced(int(J), window)
        p = len(beta) + len(lam) + basis.size
        if p >= data.n:
            rows.append({"J": int(J), "rss": float("nan"), "p": p, "gcv": float("nan"), "skipped": "p >= n"})
            continue
        try:
            m = second_stage_fit(data, fhat, beta, lam, basis, window=window)
        except RankDeficiencyError as exc:
            rows.append({"J": int(J), "rss": float("nan"), "p": p, "gcv": float("nan"), "skipped": str(exc)})
            continue
        rows.append({"J": int(J), "rss": m.rss, "p": m.p, "gcv": gcv_score(m.rss, data.n, m.p), "skipped": ""})
    valid = [r for r in rows if not r["skipped"]]
    if not valid:
        raise InvalidInputError("no knot candidate produced a usable fit")
    best = min(valid, key=lambda r: (r["gcv"], r["p"]))
    return GcvReport(rows, best["J"])


# ---------------------------------------------------------------------------
# segment instrument strength


@dataclass
class SegmentStrength:
    segmentation: str
    rows: list[dict]

    @property
    def f_stats(self) -> np.ndarray:
        return np.array([r["F"] for r in self.rows])

    @property
    def counts(self) -> np.ndarray:
        return np.array([r["n"] for r in self.rows])


def _segment_edges(fhat, breaks):
    if isinstance(breaks, str):
        k = {"terciles": 3, "quartiles": 4}.get(breaks)
        if k is None:
            raise InvalidInputError(f"breaks must be 'terciles', 'quartiles' or a list, got {breaks!r}")
        inner = np.quantile(fhat, np.arange(1, k) / k)
        return breaks, inner
    inner = np.sort(np.asarray(breaks, dtype=np.float64))
    return "custom", inner


def _wald_f(X, Z, y, cluster=None):
    """F statistic for the ``Z`` block in ``y ~ [X | Z]``."""
    W = np.hstack([X, Z])
    n, k = W.shape
    q = Z.shape[1]
    coef = linalg.lstsq(W, y, lapack_driver="gelsy")[0]
    e = y - W @ coef
    if cluster is None:
        Xr = X
        er = y - Xr @ linalg.lstsq(Xr, y, lapack_driver="gelsy")[0]
        rss_u, rss_r = float(e @ e), float(er @ er)
        return ((rss_r - rss_u) / q) / (rss_u / (n - k))
    bread = linalg.inv(W.T @ W)
    _, inv = np.unique(cluster, return_inverse=True)
    G = int(inv.max()) + 1
    sc = np.zeros((G, k))
    np.add.at(sc, inv, W * e[:, None])
    V = G / max(G - 1, 1) * (n - 1) / max(n - k, 1) * bread @ (sc.T @ sc) @ bread
    b = coef[-q:]
    Vz = V[-q:, -q:]
    return float(b @ linalg.solve(Vz, b)) / q


def segment_f_stats(data: Dataset, fhat, x_terms, z_terms, breaks="terciles", cluster: bool = False,
                    outcome: str = "participates") -> SegmentStrength:
    """Per-segment instrument F statistics from a linear probability model.

    ``data`` must already carry any derived instrument term (e.g. the
    index). A segment whose instrument terms are collinear with the
    covariates gets ``F = 0`` and a flag; segments with fewer than
    ``10 * len(z_terms)`` rows are flagged underpowered.
    """
    fhat = np.asarray(fhat, dtype=np.float64)
    name, inner = _segment_edges(fhat, breaks)
    seg = np.searchsorted(inner, fhat, side="right")
    X_all = design_matrix(data, x_terms)
    Z_all = design_matrix(data, z_terms)
    y_all = data[outcome]
    cl_all = data["cluster_id"] if cluster else None
    edges = np.concatenate([[0.0], inner, [1.0]])
    rows = []
    q = len(z_terms)
    for s in range(len(inner) + 1):
        m = seg == s
        n = int(m.sum())
        row = {"segment": s + 1, "lo": float(edges[s]), "hi": float(edges[s + 1]), "n": n,
               "df1": q, "df2": n - len(x_terms) - q, "F": 0.0, "flag": ""}
        flags = []
        if n < 10 * q:
            flags.append("underpowered")
        X, Z, y = X_all[m], Z_all[m], y_all[m]
        try:
            if n <= len(x_terms) + q:
                raise RankDeficiencyError("too few rows")
            check_rank(X, list(x_terms), "segment covariates")
            check_rank(np.hstack([X, Z]), list(x_terms) + list(z_terms), "segment design")
        except RankDeficiencyError:
            flags.append("instrument constant or collinear in segment")
            row["flag"] = ";".join(flags)
            rows.append(row)
            continue
        row["F"] = float(_wald_f(X, Z, y, cl_all[m] if cluster else None))
        row["flag"] = ";".join(flags)
        rows.append(row)
    return SegmentStrength(name, rows)


# ---------------------------------------------------------------------------
# generalized propensity score balance


@dataclass
class BalanceReport:
    covariates: list[str]
    t_before: np.ndarray  # (intervals, covariates)
    t_after: np.ndarray
    degree: int

    @property
    def significant_before(self) -> int:
        return int(np.sum(np.abs(self.t_before) > 1.96))

    @property
    def significant_after(self) -> int:
        return int(np.sum(np.abs(self.t_after) > 1.96))

    @property
    def n_tests(self) -> int:
        return int(self.t_before.size)


def _two_sample_t(a, b):
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        return 0.0
    va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
    se = np.sqrt(va / na + vb / nb)
    if se == 0:
        return 0.0
    return float((a.mean() - b.mean()) / se)


def _poly(X, degree):
    cols = [np.ones(X.shape[0])]
    for d in range(1, degree + 1):
        cols.extend((X**d).T)
    return np.column_stack(cols)


def gps_balance(data: Dataset, z_col: str, x_cols=COVARIATE_COLUMNS, degree: int = 1,
                n_intervals: int = 3, n_blocks: int = 5) -> BalanceReport:
    """Balance of covariates across intervals of a continuous instrument.

    ``Z | X`` is modeled as normal with a polynomial mean of the given
    degree and constant variance. For each interval of ``Z`` (split at
    percentiles) the generalized propensity score is evaluated at the
    interval's median ``Z`` for every row; rows are blocked on quintiles of
    that score and covariate means inside versus outside the interval are
    compared within blocks. Before-conditioning t-tests compare the raw
    means.
    """
    z = term_values(data, z_col)
    x_cols = list(x_cols)
    X = design_matrix(data, x_cols)
    varying = np.std(X, axis=0) > 0
    D = _poly(X[:, varying], degree) if varying.any() else np.ones((data.n, 1))
    coef = linalg.lstsq(D, z, lapack_driver="gelsy")[0]
    mu = D @ coef
    resid = z - mu
    dof = max(data.n - np.linalg.matrix_rank(D), 1)
    sigma = float(np.sqrt(resid @ resid / dof))
    if not sigma > 1e-12 * max(1.0, float(np.std(z))):
        raise InvalidInputError("generalized propensity score is degenerate: Z is (nearly) a deterministic function of X")
    cuts = np.quantile(z, np.arange(1, n_intervals) / n_intervals)
    interval = np.searchsorted(cuts, z, side="right")
    k = len(x_cols)
    t_before = np.zeros((n_intervals, k))
    t_after = np.zeros((n_intervals, k))
    for i in range(n_intervals):
        inside = interval == i
        if not inside.any() or inside.all():
            continue
        for j in range(k):
            t_before[i, j] = _two_sample_t(X[inside, j], X[~inside, j])
        z_med = float(np.median(z[inside]))
        gps = stats.norm.pdf(z_med, loc=mu, scale=sigma)
        edges = np.quantile(gps[inside], np.linspace(0, 1, n_blocks + 1))
        block = np.clip(np.searchsorted(edges, gps, side="right") - 1, 0, n_blocks - 1)
        in_range = (gps >= edges[0]) & (gps <= edges[-1])
        for j in range(k):
            diff, var, wsum = 0.0, 0.0, 0.0
            for bk in range(n_blocks):
                a = X[inside & (block == bk), j]
                b = X[~inside & in_range & (block == bk), j]
                if a.shape[0] < 2 or b.shape[0] < 2:
                    continue
                w = a.shape[0]
                diff += w * (a.mean() - b.mean())
                var += w * w * (np.var(a, ddof=1) / a.shape[0] + np.var(b, ddof=1) / b.shape[0])
                wsum += w
            if wsum > 0 and var > 0:
                t_after[i, j] = (diff / wsum) / (np.sqrt(var) / wsum)
    return BalanceReport(x_cols, t_before, t_after, degree)


# ---------------------------------------------------------------------------
# falsification


def _check_schema(elig: Dataset, inelig: Dataset, config: PipelineConfig):
    needed = set(elig.names) - set(elig.oracle_names) - {"zindex"}
    missing = sorted(needed - set(inelig.names))
    if missing:
        raise SchemaError(f"ineligible sample is missing columns {missing}")


def _falsification_fit(elig: Dataset, inelig: Dataset, config: PipelineConfig, start=None, check=True):
    wm = wage_fit(elig, config.wage_mode, config.wage_terms, config.selection_terms, check=check)
    elig_i = impute_wages(elig, wm)
    fs = fit_first_stage(elig_i, config, start=start, check=check)
    wm2 = wage_fit(inelig, config.wage_mode, config.wage_terms, config.selection_terms, check=check)
    inelig_i = impute_wages(inelig, wm2)
    fhat = probit_predict(fs, inelig_i)
    ss = second_stage_fit(inelig_i, fhat, config.beta_terms, config.lambda_terms, config.basis,
                          window=config.window, check=check)
    return fs, ss, mte_curve(ss, config.grid, label="falsification")


def _falsification_replicate(seq):
    sampler, config, start = _STATE["sampler"], _STATE["config"], _STATE["start"]
    e, i = sampler.draw(np.random.default_rng(seq))
    try:
        _, _, curve = _falsification_fit(e, i, config, start=start)
    except (WelfareMTEError, linalg.LinAlgError) as exc:
        return {"ok": False, "reason": f"{type(exc).__name__}: {exc}"}
    return {"ok": True, "mte": curve.mte}


def falsification_run(elig_data: Dataset, inelig_data: Dataset, config: PipelineConfig | None = None,
                      B: int = 200, seed: int = 0, workers: int | None = None) -> MTECurve:
    """MTE curve on a sample the program cannot affect.

    The first stage is fit on ``elig_data`` and used to predict F on
    ``inelig_data``, where the second stage is then fit. Bands come from a
    joint state-level bootstrap of both samples (``B = 0`` skips it).
    """
    config = config or PipelineConfig()
    if inelig_data.n == 0:
        raise InvalidInputError("ineligible sample is empty")
    _check_schema(elig_data, inelig_data, config)
    elig = elig_data.without_oracle()
    inelig = inelig_data.without_oracle()
    fs, ss, curve = _falsification_fit(elig, inelig, config)
    if B <= 0:
        return curve
    workers = default_workers() if workers is None else workers
    state = {"sampler": ClusterSampler(elig, inelig), "config": config, "start": fs.coef}
    results = _run_tasks(_falsification_replicate, state, replicate_seeds(seed, B), workers)
    ok, failures = _collect(results, B)
    if len(ok) >= MIN_BAND_REPLICATES:
        curve.lo, curve.hi = percentile_band(np.array([r["mte"] for r in ok]))
    else:
        warnings.warn(f"only {len(ok)} successful replicates; no band reported", RuntimeWarning, stacklevel=2)
    curve.flags["replicates_ok"] = len(ok)
    curve.flags["replicates_failed"] = len(failures)
    return curve
