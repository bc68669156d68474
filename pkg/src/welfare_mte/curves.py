"""Marginal-response curves shared by the oracle and the estimators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_WINDOW = (0.25, 0.66)


@dataclass
class MTECurve:
    """Marginal response (hrs/wk or probability) as a function of F.

    ``lo``/``hi`` are pointwise 95% bands and may be ``None`` when no
    bootstrap was run.
    """

    grid: np.ndarray
    mte: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    window: tuple[float, float] = DEFAULT_WINDOW
    x_at: dict = field(default_factory=dict)
    label: str = ""
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.mte = np.asarray(self.mte, dtype=np.float64)
        if self.lo is not None:
            self.lo = np.asarray(self.lo, dtype=np.float64)
            self.hi = np.asarray(self.hi, dtype=np.float64)

    @property
    def has_band(self) -> bool:
        return self.lo is not None

    def at(self, f) -> np.ndarray:
        """Linear interpolation of the point estimate."""
        return np.interp(f, self.grid, self.mte)

    def covers(self, values) -> np.ndarray:
        """Pointwise indicator that ``values`` lie inside the band."""
        if not self.has_band:
            raise ValueError("curve has no confidence band")
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), self.grid.shape)
        return (self.lo <= values) & (values <= self.hi)

    @property
    def range(self) -> float:
        return float(np.max(self.mte) - np.min(self.mte))


def window_grid(window=DEFAULT_WINDOW, size: int = 41) -> np.ndarray:
    lo, hi = window
    return np.linspace(lo, hi, size)
