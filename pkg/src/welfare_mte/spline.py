"""Natural cubic spline basis in truncated-power form.

With knots ``pi_1 < ... < pi_J`` the basis is ``[1, F, S_3, ..., S_J]`` where

    d_k(F) = [(F - pi_k)_+^3 - (F - pi_J)_+^3] / (pi_J - pi_k)
    S_{k+2} = d_k - d_{J-1},   k = 1..J-2

Every element is linear below ``pi_1`` and above ``pi_J``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import DEFAULT_WINDOW
from .errors import ConfigurationError, InvalidInputError

MIN_KNOTS, MAX_KNOTS = 3, 8


@dataclass(frozen=True)
class SplineBasis:
    knots: tuple[float, ...]

    def __post_init__(self):
        k = tuple(float(v) for v in self.knots)
        if len(k) < MIN_KNOTS:
            raise ConfigurationError(f"natural spline needs at least {MIN_KNOTS} knots, got {len(k)}")
        if len(k) > MAX_KNOTS:
            raise ConfigurationError(f"at most {MAX_KNOTS} knots supported, got {len(k)}")
        if any(b <= a for a, b in zip(k, k[1:])):
            raise ConfigurationError("knots must be strictly increasing")
        if k[0] <= 0 or k[-1] >= 1:
            raise ConfigurationError("knots must lie inside (0, 1)")
        object.__setattr__(self, "knots", k)

    @property
    def size(self) -> int:
        return len(self.knots)

    @classmethod
    def equally_spaced(cls, n_knots: int, window=DEFAULT_WINDOW) -> "SplineBasis":
        """``n_knots`` knots from ``window[0]`` to ``window[1]`` inclusive."""
        lo, hi = window
        if not 0 < lo < hi < 1:
            raise ConfigurationError(f"window must satisfy 0 < lo < hi < 1, got {window}")
        if n_knots < MIN_KNOTS:
            raise ConfigurationError(f"natural spline needs at least {MIN_KNOTS} knots, got {n_knots}")
        return cls(tuple(np.linspace(lo, hi, n_knots)))

    def names(self) -> list[str]:
        return ["g1", "g2"] + [f"g{j}" for j in range(3, self.size + 1)]


def _d_terms(F, knots, order):
    """``d_k`` (order 0) or its derivatives (order 1, 2) for k = 1..J-1."""
    pj = knots[-1]
    pk = knots[:-1]
    a = np.maximum(F[:, None] - pk[None, :], 0.0)
    b = np.maximum(F[:, None] - pj, 0.0)
    denom = (pj - pk)[None, :]
    if order == 0:
        return (a**3 - b**3) / denom
    if order == 1:
        return 3.0 * (a**2 - b**2) / denom
    return 6.0 * (a - b) / denom


def natural_spline_basis(basis: SplineBasis, F, derivative: int = 0) -> np.ndarray:
    """Basis matrix (n, J) at ``F`` or its ``derivative``-th derivative (0, 1, 2).

    Scalar ``F`` gives a 1-d vector of length J.
    """
    if derivative not in (0, 1, 2):
        raise InvalidInputError("derivative must be 0, 1 or 2")
    scalar = np.ndim(F) == 0
    F = np.atleast_1d(np.asarray(F, dtype=np.float64))
    if np.any(~np.isfinite(F)) or np.any((F < 0) | (F > 1)):
        raise InvalidInputError("spline argument must lie in [0, 1]")
    knots = np.asarray(basis.knots)
    d = _d_terms(F, knots, derivative)
    S = d[:, :-1] - d[:, -1:]
    n = F.shape[0]
    if derivative == 0:
        lead = np.column_stack([np.ones(n), F])
    elif derivative == 1:
        lead = np.column_stack([np.zeros(n), np.ones(n)])
    else:
        lead = np.zeros((n, 2))
    out = np.hstack([lead, S])
    return out[0] if scalar else out


def spline_values(basis: SplineBasis, F):
    """``(values, first derivatives)`` of every basis element."""
    return natural_spline_basis(basis, F, 0), natural_spline_basis(basis, F, 1)
