"""Probit maximum likelihood by Newton-Raphson."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from . import kernels
from .dataset import Dataset
from .design import INDEX_TERM, add_index, check_rank, design_matrix
from .errors import ConvergenceError, InvalidInputError, SeparationError

CLAMP = 1e-6
GRAD_TOL = 1e-8
SEPARATION_NORM = 1e4


@dataclass
class ProbitResult:
    coef: np.ndarray
    loglik: float
    iterations: int
    grad_norm: float
    hessian: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return linalg.inv(-self.hessian)


def newton_probit(X, y, start=None, max_iter: int = 100, tol: float = GRAD_TOL, names=None, check: bool = True) -> ProbitResult:
    """Maximize the probit log-likelihood.

    Newton steps use the analytic Hessian; a step is halved until the
    log-likelihood does not decrease. Iteration stops once the max-norm of
    the per-observation mean score falls below ``tol``, after which up to
    three polishing steps are taken while they keep improving the score.

    Raises
    ------
    RankDeficiencyError
        If ``X`` is not of full column rank.
    SeparationError
        If the coefficient norm exceeds 1e4 or the fitted index classifies
        every observation correctly (the likelihood has no finite maximum).
    ConvergenceError
        If ``max_iter`` iterations are exhausted.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if check:
        check_rank(X, names, "probit design")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidInputError("probit outcome must be 0/1")
    b = np.zeros(p) if start is None else np.array(start, dtype=np.float64)

    def evaluate(beta):
        ll, score_w, hess_w = kernels.probit_terms(X @ beta, y)
        grad = X.T @ score_w
        hess = -(X.T @ (X * hess_w[:, None]))
        return ll, grad, hess

    ll, grad, hess = evaluate(b)
    if not np.isfinite(ll):
        b = np.zeros(p)
        ll, grad, hess = evaluate(b)
    it = 0
    polish = 0
    while True:
        gmax = float(np.max(np.abs(grad))) / n
        if gmax < tol:
            if polish >= 3 or float(np.max(np.abs(grad))) < tol:
                break
            polish += 1
        if it >= max_iter:
            raise ConvergenceError(f"probit did not converge in {max_iter} iterations (mean score {gmax:.3g})")
        it += 1
        try:
            step = linalg.solve(-hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(-hess, grad)[0]
        accepted = False
        for _ in range(40):
            cand = b + step
            ll_c, grad_c, hess_c = evaluate(cand)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                accepted = True
                break
            step = step / 2
        if not accepted:
            if polish:
                break
            raise ConvergenceError("probit line search failed to improve the log-likelihood")
        if polish and float(np.max(np.abs(grad_c))) >= float(np.max(np.abs(grad))):
            break
        b, ll, grad, hess = cand, ll_c, grad_c, hess_c
        if np.linalg.norm(b) > SEPARATION_NORM:
            raise SeparationError(
                f"probit coefficients diverge (norm {np.linalg.norm(b):.3g} > {SEPARATION_NORM:g}); "
                "outcome is perfectly separated"
            )
    xb = X @ b
    q = 2 * y - 1
    if np.all(q * xb > 0):
        raise SeparationError("probit index classifies every observation correctly; outcome is perfectly separated")
    return ProbitResult(b, float(ll), it, float(np.max(np.abs(grad))), hess)


def norm_cdf_clamped(index):
    return np.clip(special.ndtr(index), CLAMP, 1.0 - CLAMP)


def mills_ratio(index):
    """``phi(x) / Phi(x)`` computed in logs for stability."""
    index = np.asarray(index, dtype=np.float64)
    return np.exp(-0.5 * index * index - 0.5 * np.log(2 * np.pi) - special.log_ndtr(index))


@dataclass
class FirstStageModel:
    """Fitted participation probit.

    ``eta`` holds the coefficients on covariate terms and ``delta`` those on
    instrument terms (any term involving the instrument index or a raw
    instrument column).
    """

    terms: list[str]
    coef: np.ndarray
    loglik: float
    n: int
    iterations: int
    grad_norm: float
    cov: np.ndarray
    means: dict = field(default_factory=dict)
    index_columns: tuple[str, ...] = ()
    index_weights: np.ndarray | None = None
    outcome: str = "participates"

    @property
    def z_mask(self) -> np.ndarray:
        return np.array([_is_instrument_term(t, self.index_columns) for t in self.terms])

    @property
    def eta(self) -> dict:
        return {t: float(c) for t, c, z in zip(self.terms, self.coef, self.z_mask) if not z}

    @property
    def delta(self) -> dict:
        return {t: float(c) for t, c, z in zip(self.terms, self.coef, self.z_mask) if z}

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def index(self, data: Dataset) -> np.ndarray:
        return design_matrix(prepare(data, self), self.terms) @ self.coef

    def table(self) -> list[dict]:
        se = self.se
        z = self.z_mask
        return [
            {"term": t, "block": "delta" if zi else "eta", "coef": float(c), "se": float(s)}
            for t, c, s, zi in zip(self.terms, self.coef, se, z)
        ]


def _is_instrument_term(term, index_columns) -> bool:
    parts = [p.strip() for p in term.split("*")]
    zs = set(index_columns)
    return any(p == INDEX_TERM or p in zs or (p.startswith("log_") and p[4:] in zs) for p in parts)


def prepare(data: Dataset, model: FirstStageModel) -> Dataset:
    """Attach the instrument index with the model's stored weights."""
    if model.index_weights is None or not model.index_columns:
        return data
    return add_index(data, model.index_columns, model.index_weights)


def probit_fit(
    data: Dataset,
    x_cols,
    z_terms,
    outcome: str = "participates",
    index_columns=(),
    index_weights=None,
    start=None,
    check: bool = True,
) -> FirstStageModel:
    """Participation probit on covariate terms ``x_cols`` and instrument terms ``z_terms``.

    When ``index_columns``/``index_weights`` are given, the ``zindex`` term
    is built from them (and reused at prediction time).
    """
    terms = list(x_cols) + list(z_terms)
    model = FirstStageModel(terms, np.zeros(len(terms)), 0.0, data.n, 0, 0.0, np.zeros((0, 0)),
                            index_columns=tuple(index_columns),
                            index_weights=None if index_weights is None else np.asarray(index_weights, dtype=float),
                            outcome=outcome)
    d = prepare(data, model)
    X = design_matrix(d, terms)
    res = newton_probit(X, d[outcome], start=start, names=terms, check=check)
    model.coef = res.coef
    model.loglik = res.loglik
    model.iterations = res.iterations
    model.grad_norm = res.grad_norm
    model.cov = res.cov
    model.means = {t: float(v) for t, v in zip(terms, X.mean(axis=0))}
    return model


def probit_predict(model: FirstStageModel, rows) -> np.ndarray:
    """``Phi(index)`` clamped to ``[1e-6, 1 - 1e-6]``.

    ``rows`` is a :class:`Dataset` or a design matrix ordered as
    ``model.terms``.
    """
    if isinstance(rows, Dataset):
        idx = model.index(rows)
    else:
        idx = np.asarray(rows, dtype=np.float64) @ model.coef
    return norm_cdf_clamped(idx)
