"""Static labor supply with a welfare program and heterogeneous agents.

Utility is quadratic in hours and income,

    U(H, Y) = theta1*H - theta2/2*H**2 + Y - theta3/2*Y**2,

so optimal hours on each linear budget segment are available in closed form.
An agent participates when the indirect-utility gain from the welfare
segment, ``dV``, covers the fixed cost ``phi = max(0, kappa0 + kappa1*log z + nu)``.

The module also draws synthetic populations (:func:`simulate_population`)
and computes exact ground truth by brute force over those populations:
participation rate, treatment on the treated and the marginal response
curve (:func:`true_mte_curve`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from . import kernels
from .curves import DEFAULT_WINDOW, MTECurve
from .dataset import COVARIATE_COLUMNS, Dataset
from .errors import ConfigurationError, InvalidInputError, OutOfSupportError

DEFAULT_H_MAX = 60.0


def _finite(name, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise InvalidInputError(f"{name} must be finite, got {v!r}")


# ---------------------------------------------------------------------------
# agent-level types


@dataclass(frozen=True)
class Preferences:
    theta1: float
    theta2: float
    theta3: float = 0.0

    def __post_init__(self):
        _finite("preferences", self.theta1, self.theta2, self.theta3)
        if self.theta2 <= 0:
            raise InvalidInputError(f"theta2 must be > 0, got {self.theta2}")
        if self.theta3 < 0:
            raise InvalidInputError(f"theta3 must be >= 0, got {self.theta3}")


@dataclass(frozen=True)
class FixedCost:
    """Participation cost ``phi = max(0, kappa0 + kappa1*log(z) + nu)``."""

    z: float
    kappa0: float
    kappa1: float
    nu: float = 0.0

    def __post_init__(self):
        if not (self.z > 0) or math.isnan(self.z):
            raise InvalidInputError(f"instrument level z must be > 0, got {self.z}")
        if self.nu < 0:
            raise InvalidInputError(f"nu must be >= 0, got {self.nu}")

    @property
    def index(self) -> float:
        return self.kappa0 + self.kappa1 * math.log(self.z)

    @property
    def phi(self) -> float:
        return max(0.0, self.index + self.nu)


@dataclass(frozen=True)
class BudgetConstraint:
    w: float
    n: float = 0.0
    g: float = 0.0
    t: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        _finite("budget constraint", self.w, self.n, self.g, self.t, self.r)
        if self.w <= 0:
            raise InvalidInputError(f"wage must be > 0, got {self.w}")
        if self.n < 0 or self.g < 0:
            raise InvalidInputError("nonlabor income and guarantee must be >= 0")
        if not (0 <= self.t <= 1 and 0 <= self.r <= 1):
            raise InvalidInputError("tax rates must lie in [0, 1]")

    @property
    def net_wage_on(self) -> float:
        return self.w * (1.0 - self.t)

    @property
    def virtual_income_on(self) -> float:
        return self.g + (1.0 - self.r) * self.n

    @property
    def eligible(self) -> bool:
        return self.g - self.r * self.n >= 0

    @property
    def breakeven_hours(self) -> float:
        """Hours at which the benefit ``g - t*w*H - r*n`` reaches zero."""
        if self.t == 0:
            return math.inf
        return max(0.0, (self.g - self.r * self.n) / (self.t * self.w))

    def benefit(self, hours: float) -> float:
        return self.g - self.t * self.w * hours - self.r * self.n


@dataclass(frozen=True)
class Agent:
    preferences: Preferences
    cost: FixedCost
    constraint: BudgetConstraint
    covariates: Mapping[str, float] = field(default_factory=dict)
    cluster_id: int = 0
    h_max: float = DEFAULT_H_MAX


@dataclass(frozen=True)
class RegimeResult:
    utility: float
    hours: float
    eligible: bool = True


@dataclass(frozen=True)
class SimOutcome:
    hours: float
    participates: bool
    delta: float
    utility_gain: float
    phi: float
    eligible: bool


# ---------------------------------------------------------------------------
# scalar operations


def utility(hours, income, prefs: Preferences):
    return (
        prefs.theta1 * hours
        - 0.5 * prefs.theta2 * hours * hours
        + income
        - 0.5 * prefs.theta3 * income * income
    )


def optimal_hours(prefs: Preferences, net_wage: float, virtual_income: float, h_cap: float = DEFAULT_H_MAX) -> float:
    """Utility-maximizing hours on the segment ``Y = net_wage*H + virtual_income``,
    ``0 <= H <= h_cap``."""
    _finite("optimal_hours inputs", net_wage, virtual_income, h_cap)
    if net_wage < 0 or virtual_income < 0 or h_cap <= 0:
        raise InvalidInputError("need net_wage >= 0, virtual_income >= 0 and h_cap > 0")
    h, _, _, _, _ = kernels.solve_regimes(
        prefs.theta1, prefs.theta2, prefs.theta3, net_wage, virtual_income, 0.0, 0.0, 0.0, h_cap
    )
    return float(h[0])


def _solve_agent(agent: Agent):
    p, c = agent.preferences, agent.constraint
    h_off, v_off, h_on, v_on, elig = kernels.solve_regimes(
        p.theta1, p.theta2, p.theta3, c.w, c.n, c.g, c.t, c.r, agent.h_max
    )
    return float(h_off[0]), float(v_off[0]), float(h_on[0]), float(v_on[0]), bool(elig[0])


def regime_utility(agent: Agent, regime: str) -> RegimeResult:
    """Maximized utility (excluding the fixed cost) and hours in a regime.

    ``regime`` is ``"on"`` or ``"off"``. On welfare, hours are capped at the
    breakeven point so the benefit stays nonnegative; an ineligible agent
    (``g < r*n``) gets the off-welfare values with ``eligible=False``.
    """
    h_off, v_off, h_on, v_on, elig = _solve_agent(agent)
    if regime in ("off", "off-welfare"):
        return RegimeResult(v_off, h_off, True)
    if regime in ("on", "on-welfare"):
        return RegimeResult(v_on, h_on, elig)
    raise InvalidInputError(f"regime must be 'on' or 'off', got {regime!r}")


def utility_gain(agent: Agent) -> float:
    """``dV``: indirect utility on welfare minus off welfare (may be negative)."""
    _, v_off, _, v_on, _ = _solve_agent(agent)
    return v_on - v_off


def participation_decision(dv, phi):
    """``dV - phi >= 0``; ties participate."""
    return np.asarray(dv) - np.asarray(phi) >= 0


def participate(agent: Agent) -> bool:
    _, v_off, _, v_on, elig = _solve_agent(agent)
    return bool(elig and participation_decision(v_on - v_off, agent.cost.phi))


def delta(agent: Agent) -> float:
    """Hours change from going onto welfare (breakeven cap included)."""
    h_off, _, h_on, _, _ = _solve_agent(agent)
    return h_on - h_off


def simulate_agent(agent: Agent) -> SimOutcome:
    h_off, v_off, h_on, v_on, elig = _solve_agent(agent)
    dv = v_on - v_off
    phi = agent.cost.phi
    part = bool(elig and participation_decision(dv, phi))
    return SimOutcome(
        hours=h_on if part else h_off,
        participates=part,
        delta=h_on - h_off,
        utility_gain=dv,
        phi=phi,
        eligible=elig,
    )


@dataclass(frozen=True)
class LocusPoint:
    """Solutions of ``dV(s) = phi`` along a one-parameter preference path.

    ``roots`` is empty when no solution exists on the search interval.
    """

    phi: float
    roots: tuple[float, ...]

    @property
    def solved(self) -> bool:
        return bool(self.roots)


def indifference_locus(
    constraint: BudgetConstraint,
    phi_grid: Sequence[float],
    prefs: Preferences | None = None,
    path: Callable[[float], Preferences] | None = None,
    bounds: tuple[float, float] = (-100.0, 100.0),
    n_scan: int = 4001,
    h_max: float = DEFAULT_H_MAX,
) -> list[LocusPoint]:
    """Preference values that make an agent indifferent to participating.

    By default the path varies ``theta1`` with ``theta2``/``theta3`` held at
    ``prefs``. A custom ``path`` maps a scalar to :class:`Preferences`. Every
    sign change of ``dV(s) - phi`` on a scan of ``bounds`` is refined by
    bisection, so multiple roots are all returned.
    """
    if path is None:
        if prefs is None:
            raise InvalidInputError("need either prefs or path")
        base = prefs
        path = lambda s: Preferences(s, base.theta2, base.theta3)  # noqa: E731
    phis = [float(p) for p in phi_grid]
    if any(p < 0 for p in phis):
        raise InvalidInputError("phi values must be >= 0")
    c = constraint

    def dv_at(s_values):
        ps = [path(float(s)) for s in np.atleast_1d(s_values)]
        h_off, v_off, h_on, v_on, elig = kernels.solve_regimes(
            [p.theta1 for p in ps], [p.theta2 for p in ps], [p.theta3 for p in ps],
            c.w, c.n, c.g, c.t, c.r, h_max,
        )
        return np.where(elig, v_on - v_off, -np.inf)

    scan = np.linspace(bounds[0], bounds[1], n_scan)
    dv = dv_at(scan)
    out = []
    for phi in phis:
        f = dv - phi
        roots = []
        for i in range(n_scan - 1):
            a, b = f[i], f[i + 1]
            if a == 0.0:
                roots.append(float(scan[i]))
            elif np.isfinite(a) and np.isfinite(b) and a * b < 0:
                r = optimize.bisect(
                    lambda s: float(dv_at(s)[0]) - phi, scan[i], scan[i + 1], xtol=1e-14, rtol=1e-15
                )
                roots.append(float(r))
        if f[-1] == 0.0:
            roots.append(float(scan[-1]))
        out.append(LocusPoint(phi, tuple(roots)))
    return out


# ---------------------------------------------------------------------------
# population specification


_FAMILIES = ("constant", "normal", "lognormal", "uniform", "profile")


@dataclass(frozen=True)
class Marginal:
    """One-dimensional distribution addressed through its quantile function.

    ``profile`` is a deterministic piecewise-linear function of the agent's
    cost rank (the uniform behind ``nu``); it is how cost and preferences
    are made to co-move nonlinearly.
    """

    family: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ConfigurationError(f"unknown distribution family {self.family!r}")
        p = self.params
        try:
            if self.family == "constant":
                float(p["value"])
            elif self.family == "normal":
                if not float(p["sd"]) > 0:
                    raise ConfigurationError("normal sd must be > 0")
                float(p["mean"])
            elif self.family == "lognormal":
                if not float(p["sd_log"]) > 0:
                    raise ConfigurationError("lognormal sd_log must be > 0")
                float(p["mean_log"])
            elif self.family == "uniform":
                if not float(p["high"]) > float(p["low"]):
                    raise ConfigurationError("uniform needs high > low")
            elif self.family == "profile":
                pts = np.asarray(p["points"], dtype=float)
                if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
                    raise ConfigurationError("profile points must be [[u, value], ...] with >= 2 rows")
                if np.any(np.diff(pts[:, 0]) <= 0) or pts[0, 0] < 0 or pts[-1, 0] > 1:
                    raise ConfigurationError("profile u values must increase inside [0, 1]")
        except KeyError as exc:
            raise ConfigurationError(f"{self.family} distribution missing parameter {exc}") from None

    @classmethod
    def parse(cls, obj) -> "Marginal":
        if isinstance(obj, Marginal):
            return obj
        if isinstance(obj, (int, float)):
            return cls("constant", {"value": float(obj)})
        if not isinstance(obj, Mapping) or "family" not in obj:
            raise ConfigurationError(f"cannot read distribution from {obj!r}")
        params = {k: v for k, v in obj.items() if k != "family"}
        return cls(str(obj["family"]), params)

    def lower_bound(self) -> float:
        p = self.params
        if self.family == "constant":
            return float(p["value"])
        if self.family == "normal":
            return -math.inf
        if self.family == "lognormal":
            return 0.0
        if self.family == "uniform":
            return float(p["low"])
        return float(np.min(np.asarray(p["points"], dtype=float)[:, 1]))

    def strictly_positive(self) -> bool:
        if self.family == "lognormal":
            return True
        if self.family == "normal":
            return False
        return self.lower_bound() > 0

    def median(self) -> float:
        return float(self.ppf(np.array([0.5]), cost_rank=np.array([0.5]))[0])

    def ppf(self, u, cost_rank=None, truncate_at_zero: bool = False) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        p = self.params
        if self.family == "constant":
            return np.full(u.shape, float(p["value"]))
        if self.family == "normal":
            mean, sd = float(p["mean"]), float(p["sd"])
            if truncate_at_zero:
                a = (0.0 - mean) / sd
                return stats.truncnorm.ppf(u, a, np.inf, loc=mean, scale=sd)
            return stats.norm.ppf(u, loc=mean, scale=sd)
        if self.family == "lognormal":
            return np.exp(float(p["mean_log"]) + float(p["sd_log"]) * stats.norm.ppf(u))
        if self.family == "uniform":
            lo, hi = float(p["low"]), float(p["high"])
            return lo + (hi - lo) * u
        pts = np.asarray(p["points"], dtype=float)
        if cost_rank is None:
            raise ConfigurationError("profile distributions need the cost rank")
        return np.interp(cost_rank, pts[:, 0], pts[:, 1])


def _effects(obj) -> dict:
    out = {}
    for k, v in dict(obj or {}).items():
        if k not in COVARIATE_COLUMNS:
            raise ConfigurationError(f"unknown covariate {k!r} in covariate effects")
        out[k] = float(v)
    return out


@dataclass(frozen=True)
class PreferenceSpec:
    """Joint distribution of (theta1, theta2, theta3, nu).

    ``theta1`` is either drawn directly (utility units) or anchored: the
    draw is a desired-hours level ``h`` and ``theta1 = theta2*h - anchor_wage``,
    so that with ``theta3 = 0`` an agent facing net wage ``anchor_wage``
    works ``h`` hours. ``covariate_effects`` shift the draw linearly.
    ``correlation`` is a Gaussian-copula correlation matrix in the order
    (theta1, theta2, theta3, nu).
    """

    theta1: Marginal
    theta2: Marginal
    theta3: Marginal = Marginal("constant", {"value": 0.0})
    nu: Marginal = Marginal("constant", {"value": 0.0})
    anchor_wage: float | None = None
    covariate_effects: Mapping[str, float] = field(default_factory=dict)
    correlation: np.ndarray | None = None

    def __post_init__(self):
        if not self.theta2.strictly_positive():
            raise ConfigurationError("theta2 distribution must have support in (0, inf)")
        if self.theta3.lower_bound() < 0:
            raise ConfigurationError("theta3 distribution must be nonnegative")
        if self.nu.family in ("uniform", "constant", "profile") and self.nu.lower_bound() < 0:
            raise ConfigurationError("nu must be nonnegative")
        if self.correlation is not None:
            r = np.asarray(self.correlation, dtype=float)
            if r.shape != (4, 4) or not np.allclose(r, r.T) or not np.allclose(np.diag(r), 1.0):
                raise ConfigurationError("correlation must be a symmetric 4x4 matrix with unit diagonal")
            if np.min(np.linalg.eigvalsh(r)) < -1e-10:
                raise ConfigurationError("correlation matrix is not positive semi-definite")
            object.__setattr__(self, "correlation", r)

    @classmethod
    def parse(cls, obj: Mapping) -> "PreferenceSpec":
        obj = dict(obj)
        t1 = obj.get("theta1")
        anchor_wage = None
        if isinstance(t1, Mapping) and "anchor_hours" in t1:
            anchor_wage = float(t1.get("anchor_wage", 0.0))
            t1m = Marginal.parse(t1["anchor_hours"])
        else:
            t1m = Marginal.parse(t1)
        corr = obj.get("correlation")
        return cls(
            theta1=t1m,
            theta2=Marginal.parse(obj["theta2"]),
            theta3=Marginal.parse(obj.get("theta3", 0.0)),
            nu=Marginal.parse(obj.get("nu", 0.0)),
            anchor_wage=anchor_wage,
            covariate_effects=_effects(obj.get("covariate_effects")),
            correlation=None if corr is None else np.asarray(corr, dtype=float),
        )


@dataclass(frozen=True)
class InstrumentSpec:
    """State-level administrative barrier generating process.

    Each state draws a latent log barrier ``b ~ N(log_mean, log_sd)``; the
    cost index uses ``z = exp(b)``. The observed columns ``z1..zk`` are
    ``exp(b + offset_j + e_j)`` with ``e_j ~ N(0, noise_sd_j)``.
    """

    log_mean: float = 0.0
    log_sd: float = 0.5
    n_barriers: int = 1
    offsets: tuple[float, ...] = ()
    noise_sd: tuple[float, ...] = ()

    def __post_init__(self):
        if self.log_sd < 0 or self.n_barriers < 1:
            raise ConfigurationError("instrument log_sd must be >= 0 and n_barriers >= 1")
        offs = tuple(self.offsets) or (0.0,) * self.n_barriers
        sds = tuple(self.noise_sd) or (0.0,) * self.n_barriers
        if len(offs) != self.n_barriers or len(sds) != self.n_barriers:
            raise ConfigurationError("offsets/noise_sd must have one entry per barrier")
        if any(s < 0 for s in sds):
            raise ConfigurationError("noise_sd must be >= 0")
        object.__setattr__(self, "offsets", tuple(float(o) for o in offs))
        object.__setattr__(self, "noise_sd", tuple(float(s) for s in sds))


@dataclass(frozen=True)
class ProgramSpec:
    """Per-state guarantee and tax rates; ``g_family_slope`` scales the
    guarantee by ``1 + slope*(family_size - 3)``."""

    g: Marginal = Marginal("constant", {"value": 100.0})
    t: Marginal = Marginal("constant", {"value": 0.4})
    r: Marginal = Marginal("constant", {"value": 0.0})
    g_family_slope: float = 0.0


@dataclass(frozen=True)
class WageSpec:
    """``log w = intercept + effects.x + state effect + noise``."""

    intercept: float = math.log(8.0)
    covariate_effects: Mapping[str, float] = field(default_factory=dict)
    state_sd: float = 0.0
    sd: float = 0.0


@dataclass(frozen=True)
class NonlaborSpec:
    prob_zero: float = 1.0
    mean_log: float = 3.0
    sd_log: float = 0.5


@dataclass(frozen=True)
class CovariateSpec:
    age_low: int = 20
    age_high: int = 55
    p_black: float = 0.35
    mean_extra_children: float = 1.0
    p_child_under6: float = 0.4
    unemp_mean: float = 6.0
    unemp_sd: float = 1.5
    fs_base: float = 40.0
    fs_per_person: float = 15.0


@dataclass(frozen=True)
class PopulationSpec:
    preferences: PreferenceSpec
    kappa0: float = 0.0
    kappa1: float = 1.0
    instrument: InstrumentSpec = InstrumentSpec()
    program: ProgramSpec = ProgramSpec()
    wages: WageSpec = WageSpec()
    nonlabor: NonlaborSpec = NonlaborSpec()
    covariates: CovariateSpec = CovariateSpec()
    n_states: int = 50
    agents_per_state: int = 100
    h_max: float = DEFAULT_H_MAX
    theta3_income_share: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.agents_per_state < 1:
            raise ConfigurationError("need at least one state and one agent per state")
        if not self.h_max > 0:
            raise ConfigurationError("h_max must be > 0")
        if not 0 < self.theta3_income_share < 1:
            raise ConfigurationError("theta3_income_share must lie in (0, 1)")
        if not math.isfinite(self.kappa1) or not (math.isfinite(self.kappa0) or self.kappa0 == math.inf):
            raise ConfigurationError("kappa0/kappa1 must be finite (kappa0 may be +inf)")
        for m, name in ((self.program.t, "t"), (self.program.r, "r")):
            if m.family != "constant" and m.family != "uniform":
                raise ConfigurationError(f"program {name} must be constant or uniform")
            lo = m.lower_bound()
            hi = float(m.params.get("high", m.params.get("value", 0.0)))
            if lo < 0 or hi > 1:
                raise ConfigurationError(f"program {name} must lie in [0, 1]")
        if not 0 <= self.nonlabor.prob_zero <= 1:
            raise ConfigurationError("nonlabor prob_zero must lie in [0, 1]")

    @property
    def n_agents(self) -> int:
        return self.n_states * self.agents_per_state

    def replace(self, **changes) -> "PopulationSpec":
        from dataclasses import replace

        return replace(self, **changes)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "PopulationSpec":
        """Build from nested mappings (the ``population`` config section)."""
        obj = dict(obj)
        if "preferences" not in obj:
            raise ConfigurationError("population spec needs a 'preferences' section")
        kw = {"preferences": PreferenceSpec.parse(obj["preferences"])}
        cost = dict(obj.get("cost", {}))
        if "kappa0" in cost:
            kw["kappa0"] = float(cost["kappa0"])
        if "kappa1" in cost:
            kw["kappa1"] = float(cost["kappa1"])
        if "instrument" in obj:
            kw["instrument"] = InstrumentSpec(**_tupled(obj["instrument"]))
        if "program" in obj:
            prog = dict(obj["program"])
            kw["program"] = ProgramSpec(
                g=Marginal.parse(prog.get("g", 100.0)),
                t=Marginal.parse(prog.get("t", 0.4)),
                r=Marginal.parse(prog.get("r", 0.0)),
                g_family_slope=float(prog.get("g_family_slope", 0.0)),
            )
        if "wages" in obj:
            wg = dict(obj["wages"])
            wg["covariate_effects"] = _effects(wg.get("covariate_effects"))
            kw["wages"] = WageSpec(**wg)
        if "nonlabor" in obj:
            kw["nonlabor"] = NonlaborSpec(**dict(obj["nonlabor"]))
        if "covariates" in obj:
            kw["covariates"] = CovariateSpec(**dict(obj["covariates"]))
        for key in ("n_states", "agents_per_state", "seed"):
            if key in obj:
                kw[key] = int(obj[key])
        for key in ("h_max", "theta3_income_share"):
            if key in obj:
                kw[key] = float(obj[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


def _tupled(obj):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in dict(obj).items()}


# ---------------------------------------------------------------------------
# population simulation


@dataclass
class _Observables:
    """Per-agent observables; every field is an array of length m."""

    covariates: dict
    state: np.ndarray
    log_z: np.ndarray
    barriers: np.ndarray  # (m, k)
    w: np.ndarray
    n: np.ndarray
    g: np.ndarray
    t: np.ndarray
    r: np.ndarray


def _state_draws(spec: PopulationSpec, rng: np.random.Generator) -> dict:
    S = spec.n_states
    ins = spec.instrument
    latent = ins.log_mean + ins.log_sd * rng.standard_normal(S)
    noise = rng.standard_normal((S, ins.n_barriers)) * np.asarray(ins.noise_sd)
    barriers = latent[:, None] + np.asarray(ins.offsets)[None, :] + noise
    prog = spec.program
    g = np.maximum(prog.g.ppf(rng.uniform(size=S), cost_rank=np.full(S, 0.5)), 0.0)
    t = prog.t.ppf(rng.uniform(size=S))
    r = prog.r.ppf(rng.uniform(size=S))
    cov = spec.covariates
    unemp = np.maximum(cov.unemp_mean + cov.unemp_sd * rng.standard_normal(S), 0.5)
    region = rng.integers(0, 4, size=S)
    wage_effect = spec.wages.state_sd * rng.standard_normal(S)
    return dict(latent=latent, barriers=barriers, g=g, t=t, r=r, unemp=unemp, region=region, wage_effect=wage_effect)


def _agent_observables(spec: PopulationSpec, states: dict, s: int, m: int, rng: np.random.Generator) -> _Observables:
    cov = spec.covariates
    age = rng.integers(cov.age_low, cov.age_high + 1, size=m).astype(float)
    black = (rng.uniform(size=m) < cov.p_black).astype(float)
    kids = 1.0 + rng.poisson(cov.mean_extra_children, size=m)
    family_size = 1.0 + kids
    kids6 = rng.binomial(np.minimum(kids, 2).astype(int), cov.p_child_under6).astype(float)
    region = states["region"][s]
    x = {
        "age": age,
        "black": black,
        "family_size": family_size,
        "kids_under6": kids6,
        "unemp_rate": np.full(m, states["unemp"][s]),
        "region1": np.full(m, float(region == 1)),
        "region2": np.full(m, float(region == 2)),
        "region3": np.full(m, float(region == 3)),
        "fs_guarantee": cov.fs_base + cov.fs_per_person * family_size,
    }
    ws = spec.wages
    log_w = ws.intercept + states["wage_effect"][s] + ws.sd * rng.standard_normal(m)
    for k, b in ws.covariate_effects.items():
        log_w = log_w + b * x[k]
    nl = spec.nonlabor
    positive = rng.uniform(size=m) >= nl.prob_zero
    n = np.where(positive, np.exp(nl.mean_log + nl.sd_log * rng.standard_normal(m)), 0.0)
    g = states["g"][s] * np.maximum(1.0 + spec.program.g_family_slope * (family_size - 3.0), 0.0)
    return _Observables(
        covariates=x,
        state=np.full(m, s, dtype=float),
        log_z=np.full(m, states["latent"][s]),
        barriers=np.tile(states["barriers"][s], (m, 1)),
        w=np.exp(log_w),
        n=n,
        g=g,
        t=np.full(m, states["t"][s]),
        r=np.full(m, states["r"][s]),
    )


def _copula_uniforms(pref: PreferenceSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((m, 4))
    if pref.correlation is not None:
        vals, vecs = np.linalg.eigh(pref.correlation)
        root = vecs * np.sqrt(np.maximum(vals, 0.0))
        z = z @ root.T
    u = stats.norm.cdf(z)
    return np.clip(u, 1e-15, 1 - 1e-15)


@dataclass
class Unobservables:
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    nu: np.ndarray
    cost_rank: np.ndarray


def _unobservables(spec: PopulationSpec, obs: _Observables, rng: np.random.Generator) -> Unobservables:
    pref = spec.preferences
    m = obs.w.shape[0]
    u = _copula_uniforms(pref, m, rng)
    rank = u[:, 3]
    nu = pref.nu.ppf(rank, cost_rank=rank, truncate_at_zero=True)
    nu = np.maximum(nu, 0.0)
    theta2 = pref.theta2.ppf(u[:, 1], cost_rank=rank)
    theta3 = pref.theta3.ppf(u[:, 2], cost_rank=rank)
    base = pref.theta1.ppf(u[:, 0], cost_rank=rank)
    for k, b in pref.covariate_effects.items():
        base = base + b * obs.covariates[k]
    if pref.anchor_wage is not None:
        theta1 = theta2 * base - pref.anchor_wage
    else:
        theta1 = base
    # non-satiation: keep theta3*Y below the configured share over feasible incomes
    y_max = np.maximum(obs.w * spec.h_max + obs.n, obs.w * (1 - obs.t) * spec.h_max + obs.g + (1 - obs.r) * obs.n)
    theta3 = np.minimum(theta3, spec.theta3_income_share / np.maximum(y_max, 1e-12))
    return Unobservables(theta1, theta2, theta3, nu, rank)


def _outcomes(spec: PopulationSpec, obs: _Observables, un: Unobservables, kappa0: float | None = None):
    h_off, v_off, h_on, v_on, elig = kernels.solve_regimes(
        un.theta1, un.theta2, un.theta3, obs.w, obs.n, obs.g, obs.t, obs.r, spec.h_max
    )
    k0 = spec.kappa0 if kappa0 is None else kappa0
    with np.errstate(invalid="ignore"):
        phi = np.maximum(0.0, k0 + spec.kappa1 * obs.log_z + un.nu)
    dv = v_on - v_off
    part = elig & participation_decision(dv, phi)
    return dict(h_off=h_off, h_on=h_on, dv=dv, delta=h_on - h_off, phi=phi, eligible=elig, participates=part)


def _draw(spec: PopulationSpec):
    root = np.random.SeedSequence(spec.seed)
    state_seq, agent_seq = root.spawn(2)
    states = _state_draws(spec, np.random.default_rng(state_seq))
    obs_parts, un_parts = [], []
    for s, seq in enumerate(agent_seq.spawn(spec.n_states)):
        rng = np.random.default_rng(seq)
        obs = _agent_observables(spec, states, s, spec.agents_per_state, rng)
        obs_parts.append(obs)
        un_parts.append(_unobservables(spec, obs, rng))
    obs = _Observables(
        covariates={k: np.concatenate([o.covariates[k] for o in obs_parts]) for k in COVARIATE_COLUMNS},
        **{
            f: np.concatenate([getattr(o, f) for o in obs_parts])
            for f in ("state", "log_z", "barriers", "w", "n", "g", "t", "r")
        },
    )
    un = Unobservables(**{f: np.concatenate([getattr(u, f) for u in un_parts]) for f in ("theta1", "theta2", "theta3", "nu", "cost_rank")})
    return obs, un


def simulate_population(spec: PopulationSpec) -> Dataset:
    """Draw a synthetic population and its equilibrium choices.

    Returns a :class:`Dataset` in the estimator schema plus ``oracle_*``
    ground-truth columns. The result depends only on ``spec`` (including
    its seed): every state draws from its own child seed.
    """
    obs, un = _draw(spec)
    out = _outcomes(spec, obs, un)
    part = out["participates"]
    hours = np.where(part, out["h_on"], out["h_off"])
    log_w = np.log(obs.w)
    cols = {
        "hours": hours,
        "participates": part.astype(float),
        "log_wage": np.where(hours > 0, log_w, np.nan),
        "nonlabor_income": obs.n,
        "guarantee": obs.g,
        "tax_t": obs.t,
        "tax_r": obs.r,
    }
    cols.update(obs.covariates)
    for j in range(obs.barriers.shape[1]):
        cols[f"z{j + 1}"] = np.exp(obs.barriers[:, j])
    cols["cluster_id"] = obs.state
    cols.update(
        oracle_delta=out["delta"],
        oracle_dv=out["dv"],
        oracle_phi=out["phi"],
        oracle_h_off=out["h_off"],
        oracle_h_on=out["h_on"],
        oracle_log_wage=log_w,
        oracle_log_z=obs.log_z,
        oracle_cost_rank=un.cost_rank,
        oracle_eligible=out["eligible"].astype(float),
    )
    return Dataset(cols)


@dataclass(frozen=True)
class PopulationMoments:
    participation_rate: float
    tot: float | None
    mean_effect: float
    n: int


def population_moments(spec: PopulationSpec | None = None, data: Dataset | None = None) -> PopulationMoments:
    """Participation rate, treatment on the treated and mean program effect.

    Computed on a simulated population (or on ``data`` if given, which must
    carry the oracle columns). The identity ``mean_effect = tot * rate``
    holds on the same draws.
    """
    if data is None:
        if spec is None:
            raise InvalidInputError("need a spec or a simulated dataset")
        data = simulate_population(spec)
    part = data["participates"] > 0.5
    d = data["oracle_delta"]
    n = data.n
    k = int(part.sum())
    mean_effect = float(np.sum(np.where(part, d, 0.0)) / n)
    tot = float(np.sum(d[part]) / k) if k else None
    return PopulationMoments(k / n, tot, mean_effect, n)


# ---------------------------------------------------------------------------
# ground-truth marginal response


def _reference_observables(spec: PopulationSpec, m: int) -> _Observables:
    """Observables fixed at the population means, repeated ``m`` times."""
    obs, _ = _draw(spec)
    cov = {k: np.full(m, float(np.mean(v))) for k, v in obs.covariates.items()}
    return _Observables(
        covariates=cov,
        state=np.zeros(m),
        log_z=np.full(m, float(np.mean(obs.log_z))),
        barriers=np.tile(np.mean(obs.barriers, axis=0), (m, 1)),
        w=np.full(m, float(np.exp(np.mean(np.log(obs.w))))),
        n=np.full(m, float(np.mean(obs.n))),
        g=np.full(m, float(np.mean(obs.g))),
        t=np.full(m, float(np.mean(obs.t))),
        r=np.full(m, float(np.mean(obs.r))),
    )


@dataclass
class SweepResult:
    """Participation and mean effect along a sweep of the cost intercept."""

    kappa0: np.ndarray
    participation: np.ndarray
    mean_effect: np.ndarray


def _entry_thresholds(spec, obs, un):
    # participate iff elig & dV >= 0 & kappa0 <= dV - kappa1*log z - nu
    out = _outcomes(spec, obs, un, kappa0=0.0)
    e = out["dv"] - spec.kappa1 * obs.log_z - un.nu
    e = np.where(out["eligible"] & (out["dv"] >= 0), e, -np.inf)
    return e, out["delta"]


def kappa0_sweep(spec: PopulationSpec, kappa0_grid, condition: str = "means", n_draws: int = 200_000, seed: int | None = None) -> SweepResult:
    """Participation rate and mean effect for each intercept in ``kappa0_grid``
    using common random numbers across the grid."""
    obs, un = _sweep_population(spec, condition, n_draws, seed)
    e, d = _entry_thresholds(spec, obs, un)
    order = np.argsort(-e, kind="stable")
    e_sorted = e[order]
    cum = np.concatenate([[0.0], np.cumsum(d[order])])
    m = e.shape[0]
    k0 = np.asarray(kappa0_grid, dtype=float)
    counts = np.searchsorted(-e_sorted, -k0, side="right")
    return SweepResult(k0, counts / m, cum[counts] / m)


def _sweep_population(spec, condition, n_draws, seed):
    if condition == "means":
        obs = _reference_observables(spec, n_draws)
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed if seed is None else seed, 7919]))
        un = _unobservables(spec, obs, rng)
    elif condition == "population":
        obs, un = _draw(spec)
    else:
        raise InvalidInputError(f"condition must be 'means' or 'population', got {condition!r}")
    return obs, un


def true_mte_curve(
    spec: PopulationSpec,
    p_grid=None,
    condition: str = "means",
    n_draws: int = 1_000_000,
    step: float = 0.02,
    seed: int | None = None,
    window=DEFAULT_WINDOW,
) -> MTECurve:
    """Exact marginal response ``d(mean effect)/d(participation)``.

    The cost intercept ``kappa0`` is swept with the unobservables held
    fixed; agents enter in order of their entry threshold, so the mean
    effect as a function of the participation rate ``P`` is a cumulative
    sum over the sorted draws. The derivative is a centered difference of
    half-width ``step`` in ``P``.

    ``condition="means"`` fixes all observables at their population means
    (the quantity a regression evaluated at covariate means targets);
    ``"population"`` sweeps the whole simulated population.
    """
    if p_grid is None:
        p_grid = np.linspace(window[0], window[1], 41)
    p_grid = np.asarray(p_grid, dtype=float)
    obs, un = _sweep_population(spec, condition, n_draws, seed)
    e, d = _entry_thresholds(spec, obs, un)
    m = e.shape[0]
    order = np.argsort(-e, kind="stable")
    entrants = np.isfinite(e[order])
    p_max = float(entrants.sum()) / m
    lo, hi = step, p_max - step
    bad = (p_grid < lo) | (p_grid > hi)
    if np.any(bad):
        raise OutOfSupportError(
            f"participation rates {p_grid[bad].tolist()} outside achievable range "
            f"[{lo:.4f}, {hi:.4f}] (max participation {p_max:.4f})",
            support=(lo, hi),
        )
    cum = np.concatenate([[0.0], np.cumsum(d[order])]) / m
    pos = np.arange(m + 1) / m

    def mean_effect(p):
        return np.interp(p, pos, cum)

    mte = (mean_effect(p_grid + step) - mean_effect(p_grid - step)) / (2 * step)
    e_sorted = e[order]
    k0 = np.interp(p_grid * m, np.arange(1, m + 1), e_sorted)
    return MTECurve(p_grid, mte, window=window, label="oracle", flags={"kappa0": k0, "p_max": p_max, "condition": condition})
