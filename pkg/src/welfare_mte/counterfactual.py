"""Reform scenarios: participation decomposition and the marginal response
at a scenario's participation rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .dataset import Dataset
from .design import design_matrix
from .errors import InvalidInputError, SchemaError
from .estimation import SecondStageModel, mte_eval
from .inference import BootstrapResult, percentile_band
from .probit import FirstStageModel, probit_predict

PROGRAM_COLUMNS = {"guarantee": "guarantee", "G": "guarantee", "g": "guarantee", "tax_t": "tax_t", "t": "tax_t"}
ORDERS = ("demographics-first", "program-first")


@dataclass
class ReformScenario:
    """One reform scenario.

    Parameters
    ----------
    label : str
    p_target : float
        Participation rate observed (or assumed) under the scenario.
    program : mapping, optional
        Absolute guarantee / earnings tax values (keys ``guarantee`` or
        ``G``, ``tax_t`` or ``t``) applied to every row.
    program_scale : mapping, optional
        Multiplicative changes to the same columns.
    covariate_means : mapping, optional
        Target means; the base columns are shifted to hit them.
    sample : Dataset, optional
        Replacement covariate sample (preferred over mean overrides).
    """

    label: str
    p_target: float
    program: Mapping[str, float] = field(default_factory=dict)
    program_scale: Mapping[str, float] = field(default_factory=dict)
    covariate_means: Mapping[str, float] = field(default_factory=dict)
    sample: Dataset | None = None

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise InvalidInputError(f"p_target must lie in (0, 1), got {self.p_target}")
        for k in list(self.program) + list(self.program_scale):
            if k not in PROGRAM_COLUMNS:
                raise InvalidInputError(f"unknown program parameter {k!r}; use guarantee/G or tax_t/t")

    def demographics(self, base: Dataset) -> Dataset:
        """Scenario covariates with the base program."""
        if self.sample is not None:
            return self.sample
        if not self.covariate_means:
            return base
        shifted = {}
        for col, target in self.covariate_means.items():
            if col not in base:
                raise SchemaError(f"covariate override {col!r} is not a column of the base sample")
            shifted[col] = base[col] + (float(target) - float(np.mean(base[col])))
        return base.with_columns(shifted)

    def apply_program(self, data: Dataset) -> Dataset:
        cols = {}
        for k, v in self.program.items():
            cols[PROGRAM_COLUMNS[k]] = np.full(data.n, float(v))
        for k, v in self.program_scale.items():
            c = PROGRAM_COLUMNS[k]
            cols[c] = cols.get(c, data[c]) * float(v)
        return data.with_columns(cols) if cols else data

    def full(self, base: Dataset) -> Dataset:
        return self.apply_program(self.demographics(base))


@dataclass(frozen=True)
class Decomposition:
    base: float
    demographics: float
    program: float
    residual: float
    p_target: float
    order: str = "demographics-first"

    @property
    def steps(self) -> tuple[float, float, float]:
        """Changes in the order they were applied; ``((base + s0) + s1) + s2 == p_target``."""
        if self.order == "program-first":
            return self.program, self.demographics, self.residual
        return self.demographics, self.program, self.residual

    def as_row(self) -> dict:
        return {
            "base_p": self.base,
            "dp_demographics": self.demographics,
            "dp_program": self.program,
            "dp_residual": self.residual,
            "p_target": self.p_target,
        }


def _mean_fhat(model: FirstStageModel, data: Dataset) -> float:
    missing = [c for c in _needed_columns(model) if c not in data]
    if missing:
        raise SchemaError(f"scenario sample is missing columns {missing} required by the first stage")
    return float(np.mean(probit_predict(model, data)))


def _needed_columns(model: FirstStageModel):
    return list(model.index_columns) if model.index_weights is not None else []


def _residual_near(gap, s, steps=8):
    r0 = gap - s
    if s + r0 == gap:
        return r0
    lo = hi = r0
    for _ in range(steps):
        lo = np.nextafter(lo, -np.inf)
        hi = np.nextafter(hi, np.inf)
        for r in (hi, lo):
            if s + r == gap:
                return float(r)
    return None


def _on_grid(x: float, q: float) -> float:
    return float(np.round(x / q) * q)


def _holds(b, d1, d2, r, target) -> bool:
    return (d1 + d2) + r == target - b and ((b + d1) + d2) + r == target


def exact_residual(base: float, d1: float, d2: float, target: float):
    """Closing residual for a two-step decomposition.

    Returns ``(base, d1, d2, r, target)`` such that both
    ``(d1 + d2) + r == target - base`` and
    ``((base + d1) + d2) + r == target`` hold exactly in floating point.

    First ``base`` and ``d1`` are moved by at most a few units in the last
    place while ``target`` is kept. Float addition cannot always close the
    gap that way (when the components are much larger than the target, the
    reachable sums skip the target's last bits), so as a fallback all five
    numbers are rounded to a common power-of-two grid ``q`` fine enough to
    keep 49 bits of the largest magnitude (``q = 2**-49`` for values below
    one), where every sum involved is exact; ``target`` then moves by at
    most ``q / 2``.
    """
    u = float(np.spacing(max(abs(base), abs(target), abs(d1), abs(d2), 1e-300)))
    for db in (0.0, u / 2, -u / 2, u, -u):
        b = base + db
        gap = target - b
        for dd in (0.0, u / 4, -u / 4, u / 2, -u / 2, u, -u):
            a = d1 + dd
            r = _residual_near(gap, a + d2)
            if r is not None and _holds(b, a, d2, r, target):
                return float(b), float(a), float(d2), r, float(target)
    _, e = math.frexp(max(abs(base), abs(target), abs(d1), abs(d2), abs(target - base)))
    q = math.ldexp(1.0, e - 49)
    b, a, c, t = (_on_grid(v, q) for v in (base, d1, d2, target))
    r = t - b - a - c
    if not _holds(b, a, c, r, t):  # pragma: no cover - ruled out by the grid argument
        raise ArithmeticError(f"no exact residual for base={base!r}, d1={d1!r}, d2={d2!r}, target={target!r}")
    return b, a, c, r, t


def participation_decomposition(model: FirstStageModel, base: Dataset, scenario: ReformScenario,
                                order: str = "demographics-first") -> Decomposition:
    """Split ``p_target - mean F(base)`` into demographic, program and residual parts.

    Attribution is sequential. With ``order="demographics-first"`` the
    demographic part moves to scenario covariates under the base program and
    the program part then applies the scenario (G, t); ``"program-first"``
    reverses the steps. The residual closes the gap exactly in floating
    point.
    """
    if order not in ORDERS:
        raise InvalidInputError(f"order must be one of {ORDERS}")
    p0 = _mean_fhat(model, base)
    p_full = _mean_fhat(model, scenario.full(base))
    if order == "demographics-first":
        p_mid = _mean_fhat(model, scenario.demographics(base))
        d_demo, d_prog = p_mid - p0, p_full - p_mid
        first, second = d_demo, d_prog
    else:
        p_mid = _mean_fhat(model, scenario.apply_program(base))
        d_prog, d_demo = p_mid - p0, p_full - p_mid
        first, second = d_prog, d_demo
    p0, first, second, resid, target = exact_residual(p0, first, second, scenario.p_target)
    if order == "demographics-first":
        d_demo, d_prog = first, second
    else:
        d_prog, d_demo = first, second
    return Decomposition(p0, d_demo, d_prog, resid, target, order)


@dataclass(frozen=True)
class ReformMTE:
    mte: float
    lo: float | None
    hi: float | None
    p: float


def scenario_x_at(model: SecondStageModel, data: Dataset) -> dict:
    """Means of the lambda terms on ``data``."""
    if not model.lambda_terms:
        return {}
    X = design_matrix(data, model.lambda_terms)
    return {t: float(v) for t, v in zip(model.lambda_terms, X.mean(axis=0))}


def mte_at_reform(second_stage: SecondStageModel, scenario: ReformScenario, base: Dataset | None = None,
                  boot: BootstrapResult | None = None) -> ReformMTE:
    """Marginal response at ``F = p_target`` and the scenario's covariate means.

    Each bootstrap replicate's second stage is evaluated at the same point
    (the scenario means, re-centered with that replicate's own centering)
    to form the percentile band.
    """
    x_at = None
    if base is not None or scenario.sample is not None:
        data = scenario.full(base if base is not None else scenario.sample)
        x_at = scenario_x_at(second_stage, data)
    value = mte_eval(second_stage, scenario.p_target, x_at)
    lo = hi = None
    if boot is not None and boot.lo is not None:
        reps = np.array([mte_eval(m, scenario.p_target, x_at) for m in boot.replicate_models()])
        lo, hi = (float(v) for v in percentile_band(reps))
    return ReformMTE(value, lo, hi, scenario.p_target)


def reform_table(first_stage: FirstStageModel, second_stage: SecondStageModel, base: Dataset,
                 scenarios, boot: BootstrapResult | None = None) -> list[dict]:
    """One row per scenario: participation components, P and MTE with band."""
    rows = []
    for sc in scenarios:
        dec = participation_decomposition(first_stage, base, sc)
        r = mte_at_reform(second_stage, sc, base, boot)
        row = {"scenario": sc.label}
        row.update(dec.as_row())
        row.update(mte=r.mte, lo95=r.lo, hi95=r.hi)
        rows.append(row)
    return rows
