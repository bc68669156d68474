"""Two-stage local-IV estimator of the marginal hours response.

First stage: participation probit giving ``F_hat``. Second stage: least
squares of hours on

    [X_beta | X_tilde * F_hat | F_hat * basis(F_hat)]

where ``X_tilde`` is mean-centered and ``basis`` is a natural cubic spline.
Given ``F_hat`` the model is linear in its parameters, so least squares is
the exact nonlinear-least-squares solution. The marginal response is

    MTE(F) = X_tilde lambda + g(F) + F g'(F).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .curves import DEFAULT_WINDOW, MTECurve, window_grid
from .dataset import Dataset
from .design import INDEX_TERM, check_rank, design_matrix, instrument_index
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DegenerateOutcomeError,
    InvalidInputError,
    OutOfSupportError,
    RankDeficiencyError,
    SeparationError,
)
from .probit import FirstStageModel, mills_ratio, probit_fit, probit_predict
from .spline import SplineBasis, natural_spline_basis

PART_TIME_CUTOFF = 35.0
OUTCOMES = ("nonwork", "part-time", "full-time")

DEFAULT_X_TERMS = (
    "const", "log_w", "log_w_net", "log_g", "log_n10",
    "age", "black", "family_size", "kids_under6", "unemp_rate",
    "region1", "region2", "region3", "fs_guarantee",
)
DEFAULT_Z_TERMS = (INDEX_TERM, f"{INDEX_TERM}*log_n10", f"{INDEX_TERM}*log_g", f"{INDEX_TERM}*log_w_net")
DEFAULT_BETA_TERMS = (
    "const", "age", "black", "family_size", "kids_under6", "unemp_rate",
    "region1", "region2", "region3", "fs_guarantee", "log_w", "log_n10",
)
DEFAULT_LAMBDA_TERMS = ("log_w_net", "log_g", "log_n10")
DEFAULT_WAGE_TERMS = ("const", "age", "black", "region1", "region2", "region3")
DEFAULT_SELECTION_TERMS = DEFAULT_WAGE_TERMS + (
    "family_size", "kids_under6", "fs_guarantee", "unemp_rate", "log_n10", "log_g", "tax_t",
)


def _lstsq(X, y):
    coef, _, _, _ = linalg.lstsq(X, y, lapack_driver="gelsy", check_finite=False)
    return coef


# ---------------------------------------------------------------------------
# second stage


@dataclass
class SecondStageModel:
    beta_terms: list[str]
    lambda_terms: list[str]
    basis: SplineBasis
    coef: np.ndarray
    rss: float
    n: int
    centering: dict
    window: tuple[float, float] = DEFAULT_WINDOW
    outcome: str = "hours"

    @property
    def n_beta(self) -> int:
        return len(self.beta_terms)

    @property
    def n_lambda(self) -> int:
        return len(self.lambda_terms)

    @property
    def beta(self) -> np.ndarray:
        return self.coef[: self.n_beta]

    @property
    def lam(self) -> np.ndarray:
        return self.coef[self.n_beta: self.n_beta + self.n_lambda]

    @property
    def g_coeffs(self) -> np.ndarray:
        return self.coef[self.n_beta + self.n_lambda:]

    @property
    def p(self) -> int:
        return self.coef.shape[0]

    @property
    def sigma2(self) -> float:
        return self.rss / max(self.n - self.p, 1)

    def names(self) -> list[str]:
        return (
            list(self.beta_terms)
            + [f"{t}~F" for t in self.lambda_terms]
            + [f"{g}:F" for g in self.basis.names()]
        )

    def blocks(self) -> list[str]:
        return ["beta"] * self.n_beta + ["lambda"] * self.n_lambda + ["g"] * self.basis.size

    def g(self, F) -> np.ndarray:
        return natural_spline_basis(self.basis, F, 0) @ self.g_coeffs

    def g_prime(self, F) -> np.ndarray:
        return natural_spline_basis(self.basis, F, 1) @ self.g_coeffs

    def xlam(self, x_at=None) -> float:
        if not x_at or self.n_lambda == 0:
            return 0.0
        missing = [t for t in self.lambda_terms if t not in x_at]
        if missing:
            raise InvalidInputError(f"evaluation point missing lambda terms {missing}")
        xt = np.array([x_at[t] - self.centering[t] for t in self.lambda_terms])
        return float(xt @ self.lam)

    def conditional_mean_f(self, F, x_at=None) -> np.ndarray:
        """The F-dependent part of E[H | X, F]: ``F*(X_tilde lambda + g(F))``."""
        F = np.asarray(F, dtype=np.float64)
        return F * (self.xlam(x_at) + self.g(F))

    def table(self) -> list[dict]:
        return [
            {"term": nm, "block": bl, "coef": float(c)}
            for nm, bl, c in zip(self.names(), self.blocks(), self.coef)
        ]


def second_stage_design(data: Dataset, fhat, beta_terms, lambda_terms, basis: SplineBasis, centering=None):
    fhat = np.asarray(fhat, dtype=np.float64)
    if fhat.shape != (data.n,):
        raise InvalidInputError(f"F_hat has shape {fhat.shape}, expected ({data.n},)")
    Xb = design_matrix(data, beta_terms)
    Xl = design_matrix(data, lambda_terms)
    if centering is None:
        centering = {t: float(v) for t, v in zip(lambda_terms, Xl.mean(axis=0))}
    if len(lambda_terms):
        Xl = (Xl - np.array([centering[t] for t in lambda_terms])) * fhat[:, None]
    Xg = natural_spline_basis(basis, fhat, 0) * fhat[:, None]
    return np.hstack([Xb, Xl, Xg]), centering


def second_stage_fit(
    data: Dataset,
    fhat,
    x_beta_cols=DEFAULT_BETA_TERMS,
    x_lambda_cols=DEFAULT_LAMBDA_TERMS,
    basis: SplineBasis | None = None,
    outcome: str | np.ndarray = "hours",
    window=DEFAULT_WINDOW,
    check: bool = True,
) -> SecondStageModel:
    """Least squares of the outcome on the constructed regressors.

    ``outcome`` is a column name or an array aligned with ``data``.
    ``x_lambda_cols`` are centered on this sample; the means are stored.
    """
    if basis is None:
        basis = SplineBasis.equally_spaced(5, window)
    X, centering = second_stage_design(data, fhat, x_beta_cols, x_lambda_cols, basis)
    model = SecondStageModel(list(x_beta_cols), list(x_lambda_cols), basis, np.zeros(X.shape[1]), 0.0,
                             data.n, centering, tuple(window),
                             outcome if isinstance(outcome, str) else "custom")
    if check:
        check_rank(X, model.names(), "second-stage design", blocks=model.blocks())
    y = data[outcome] if isinstance(outcome, str) else np.asarray(outcome, dtype=np.float64)
    coef = _lstsq(X, y)
    resid = y - X @ coef
    model.coef = coef
    model.rss = float(resid @ resid)
    return model


def _check_window(F, window):
    F = np.asarray(F, dtype=np.float64)
    lo, hi = window
    bad = (F < lo - 1e-12) | (F > hi + 1e-12)
    if np.any(bad):
        raise OutOfSupportError(
            f"F values {np.atleast_1d(F)[np.atleast_1d(bad)].tolist()} outside support window [{lo}, {hi}]",
            support=(lo, hi),
        )


def mte_eval(model: SecondStageModel, F, x_at=None, window=None):
    """Marginal response ``X_tilde lambda + g(F) + F g'(F)`` inside the window.

    ``x_at`` maps lambda terms to raw (uncentered) values; omitted means the
    centering means, where the lambda part vanishes.
    """
    window = model.window if window is None else window
    _check_window(F, window)
    scalar = np.ndim(F) == 0
    F = np.atleast_1d(np.asarray(F, dtype=np.float64))
    out = model.xlam(x_at) + model.g(F) + F * model.g_prime(F)
    return float(out[0]) if scalar else out


def mte_curve(model: SecondStageModel, grid=None, x_at=None, label: str = "estimate") -> MTECurve:
    grid = window_grid(model.window) if grid is None else np.asarray(grid, dtype=np.float64)
    return MTECurve(grid, mte_eval(model, grid, x_at), window=model.window, x_at=dict(x_at or {}), label=label)


def outcome_indicator(hours, outcome: str, cutoff: float = PART_TIME_CUTOFF) -> np.ndarray:
    h = np.asarray(hours, dtype=np.float64)
    if outcome == "nonwork":
        return (h == 0).astype(float)
    if outcome == "part-time":
        return ((h > 0) & (h < cutoff)).astype(float)
    if outcome == "full-time":
        return (h >= cutoff).astype(float)
    raise InvalidInputError(f"outcome must be one of {OUTCOMES}, got {outcome!r}")


def mte_by_outcome(
    data: Dataset,
    fhat,
    outcome: str,
    x_beta_cols=DEFAULT_BETA_TERMS,
    x_lambda_cols=DEFAULT_LAMBDA_TERMS,
    basis: SplineBasis | None = None,
    grid=None,
    window=DEFAULT_WINDOW,
    cutoff: float = PART_TIME_CUTOFF,
) -> MTECurve:
    """Marginal response of an hours-category indicator (probability scale).

    An indicator that is constant in the sample yields an exactly-zero curve
    with ``flags["degenerate"] = True``.
    """
    if data.n == 0:
        raise DegenerateOutcomeError("no rows to fit the outcome model")
    y = outcome_indicator(data["hours"], outcome, cutoff)
    model = second_stage_fit(data, fhat, x_beta_cols, x_lambda_cols, basis, outcome=y, window=window)
    curve = mte_curve(model, grid, label=outcome)
    degenerate = bool(np.all(y == y[0]))
    if degenerate:
        curve.mte = np.zeros_like(curve.mte)
    curve.flags["degenerate"] = degenerate
    curve.flags["share"] = float(y.mean())
    return curve


@dataclass
class HomogeneousIV:
    effect: float
    se: float
    coef: np.ndarray
    terms: list[str]


def homogeneous_iv_fit(data: Dataset, fhat, x_beta_cols=DEFAULT_BETA_TERMS, cluster: bool = True, check: bool = True) -> HomogeneousIV:
    """Constant-response fit: hours on ``[X_beta | F_hat]``.

    The standard error is a cluster-robust sandwich (by ``cluster_id``) when
    ``cluster`` is set, else homoskedastic; both treat ``F_hat`` as known.
    When most of the residual is ``P - F_hat`` (little other hours noise)
    this overstates the sampling error considerably, since the probit
    score equations already make that part nearly orthogonal to the
    regressors. The block bootstrap s.e. (``BootstrapResult.iv_se``)
    accounts for the first stage.
    """
    fhat = np.asarray(fhat, dtype=np.float64)
    Xb = design_matrix(data, x_beta_cols)
    X = np.column_stack([Xb, fhat])
    terms = list(x_beta_cols) + ["F"]
    if check:
        check_rank(X, terms, "constant-response design")
    y = data["hours"]
    coef = _lstsq(X, y)
    e = y - X @ coef
    n, p = X.shape
    bread = linalg.inv(X.T @ X)
    if cluster and "cluster_id" in data:
        _, inv = np.unique(data["cluster_id"], return_inverse=True)
        G = int(inv.max()) + 1
        scores = np.zeros((G, p))
        np.add.at(scores, inv, X * e[:, None])
        meat = scores.T @ scores
        adj = G / max(G - 1, 1) * (n - 1) / max(n - p, 1)
        V = adj * bread @ meat @ bread
    else:
        V = bread * float(e @ e) / max(n - p, 1)
    return HomogeneousIV(float(coef[-1]), float(np.sqrt(V[-1, -1])), coef, terms)


# ---------------------------------------------------------------------------
# wages


@dataclass
class WageModel:
    terms: list[str]
    gamma: np.ndarray
    mode: str
    n_workers: int
    mills_coef: float | None = None
    selection: FirstStageModel | None = None
    flags: dict = field(default_factory=dict)
    se: np.ndarray | None = None

    def predict(self, data: Dataset) -> np.ndarray:
        return design_matrix(data, self.terms) @ self.gamma


def wage_fit(data: Dataset, mode: str = "ols", terms=DEFAULT_WAGE_TERMS, selection_terms=DEFAULT_SELECTION_TERMS, check: bool = True) -> WageModel:
    """Log-wage regression among workers.

    ``mode="heckman"`` adds the inverse Mills ratio from an employment probit
    on ``selection_terms``. If that probit fails (separation, no
    nonworkers, non-convergence) the OLS fit is returned with
    ``flags["fallback"]`` set and a warning.
    """
    if mode not in ("ols", "heckman"):
        raise InvalidInputError(f"wage mode must be 'ols' or 'heckman', got {mode!r}")
    worker = np.isfinite(data["log_wage"])
    nw = int(worker.sum())
    if nw < 30:
        raise InvalidInputError(f"wage equation needs at least 30 workers with observed wages, got {nw}")
    workers = data.take(worker)
    X = design_matrix(workers, terms)
    if check:
        check_rank(X, list(terms), "wage design")
    y = workers["log_wage"]
    flags = {}
    if mode == "heckman":
        try:
            if nw == data.n:
                raise SeparationError("no nonworkers: employment is constant")
            emp = data.with_columns({"_employed": worker.astype(float)})
            sel = probit_fit(emp, selection_terms, (), outcome="_employed", check=check)
            idx = sel.index(workers)
            Xm = np.column_stack([X, mills_ratio(idx)])
            coef = _lstsq(Xm, y)
            resid = y - Xm @ coef
            s2 = float(resid @ resid) / max(nw - Xm.shape[1], 1)
            se = np.sqrt(np.diag(s2 * linalg.inv(Xm.T @ Xm)))
            return WageModel(list(terms), coef[:-1], "heckman", nw, float(coef[-1]), sel, flags, se)
        except (SeparationError, ConvergenceError, RankDeficiencyError) as exc:
            warnings.warn(f"employment probit failed ({exc}); using OLS wages", RuntimeWarning, stacklevel=2)
            flags["fallback"] = str(exc)
    coef = _lstsq(X, y)
    resid = y - X @ coef
    s2 = float(resid @ resid) / max(nw - X.shape[1], 1)
    se = np.sqrt(np.diag(s2 * linalg.inv(X.T @ X)))
    return WageModel(list(terms), coef, "ols", nw, None, None, flags, se)


def impute_wages(data: Dataset, model: WageModel) -> Dataset:
    """Fill missing ``log_wage`` with ``X gamma``; observed wages are kept."""
    lw = data["log_wage"]
    missing = ~np.isfinite(lw)
    if not missing.any():
        return data
    fitted = design_matrix(data.take(missing), model.terms) @ model.gamma
    out = lw.copy()
    out[missing] = fitted
    return data.with_columns({"log_wage": out})


# ---------------------------------------------------------------------------
# full pipeline


@dataclass(frozen=True)
class PipelineConfig:
    """Estimator settings. The defaults are the full survey-data model
    (inverse-variance index, index interactions with N, G and W(1-t),
    five knots on the (0.25, 0.66) window)."""

    x_terms: tuple[str, ...] = DEFAULT_X_TERMS
    z_terms: tuple[str, ...] = DEFAULT_Z_TERMS
    instrument_columns: tuple[str, ...] | None = None
    weighting: str = "inverse-variance"
    beta_terms: tuple[str, ...] = DEFAULT_BETA_TERMS
    lambda_terms: tuple[str, ...] = DEFAULT_LAMBDA_TERMS
    n_knots: int = 5
    window: tuple[float, float] = DEFAULT_WINDOW
    wage_mode: str = "ols"
    wage_terms: tuple[str, ...] = DEFAULT_WAGE_TERMS
    selection_terms: tuple[str, ...] = DEFAULT_SELECTION_TERMS
    grid_size: int = 41

    def __post_init__(self):
        lo, hi = self.window
        if not 0 < lo < hi < 1:
            raise ConfigurationError(f"window must satisfy 0 < lo < hi < 1, got {self.window}")
        if self.wage_mode not in ("ols", "heckman"):
            raise ConfigurationError(f"wage_mode must be 'ols' or 'heckman', got {self.wage_mode!r}")
        if self.grid_size < 2:
            raise ConfigurationError("grid_size must be >= 2")
        for name in ("x_terms", "z_terms", "beta_terms", "lambda_terms", "wage_terms", "selection_terms"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.instrument_columns is not None:
            object.__setattr__(self, "instrument_columns", tuple(self.instrument_columns))
        object.__setattr__(self, "window", (float(lo), float(hi)))
        SplineBasis.equally_spaced(self.n_knots, self.window)

    @property
    def basis(self) -> SplineBasis:
        return SplineBasis.equally_spaced(self.n_knots, self.window)

    @property
    def grid(self) -> np.ndarray:
        return window_grid(self.window, self.grid_size)

    def replace(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)

    def uses_index(self) -> bool:
        return any(INDEX_TERM in t.split("*") for t in self.x_terms + self.z_terms)


@dataclass
class PipelineFit:
    config: PipelineConfig
    wage_model: WageModel
    first_stage: FirstStageModel
    fhat: np.ndarray
    second_stage: SecondStageModel
    curve: MTECurve
    g_prime: np.ndarray
    iv: HomogeneousIV
    data: Dataset


def fit_first_stage(data: Dataset, config: PipelineConfig, start=None, check: bool = True, index_weights=None) -> FirstStageModel:
    cols = config.instrument_columns or tuple(data.instrument_names)
    if config.uses_index():
        if not cols:
            raise InvalidInputError("no instrument columns (z1, z2, ...) found")
        if index_weights is None:
            _, index_weights = instrument_index(
                [data[c] for c in cols], config.weighting, names=cols,
                clusters=data["cluster_id"] if "cluster_id" in data else None,
            )
        return probit_fit(data, config.x_terms, config.z_terms, index_columns=cols,
                          index_weights=index_weights, start=start, check=check)
    return probit_fit(data, config.x_terms, config.z_terms, index_columns=cols, start=start, check=check)


def fit_pipeline(data: Dataset, config: PipelineConfig | None = None, start=None, check: bool = True) -> PipelineFit:
    """Wage imputation, first-stage probit, second stage and MTE curve."""
    config = config or PipelineConfig()
    data = data.without_oracle()
    wm = wage_fit(data, config.wage_mode, config.wage_terms, config.selection_terms, check=check)
    data = impute_wages(data, wm)
    fs = fit_first_stage(data, config, start=start, check=check)
    fhat = probit_predict(fs, data)
    ss = second_stage_fit(data, fhat, config.beta_terms, config.lambda_terms, config.basis,
                          window=config.window, check=check)
    curve = mte_curve(ss, config.grid)
    gp = ss.g_prime(config.grid)
    iv = homogeneous_iv_fit(data, fhat, config.beta_terms, check=check)
    return PipelineFit(config, wm, fs, fhat, ss, curve, gp, iv, data)
