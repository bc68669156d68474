"""Ready-made synthetic populations with known marginal responses.

All worlds share one construction. Utility is quasilinear (``theta3 = 0``),
wages and program parameters are common, and ``theta1`` is anchored at a
desired-hours level ``h_a`` so that

    H_off = h_a + t*w / (2*theta2),   H_on = h_a - t*w / (2*theta2),
    dV    = g - t*w*h_a.

The gain ``dV`` does not depend on ``theta2``, so selection runs through the
cost draw ``nu`` alone and the participation probit is correctly specified.
``theta2`` is a profile in the cost rank ``u``, which makes the hours
response of the agent at rank ``u`` equal to ``-t*w/theta2(u)``: the true
marginal response at participation rate ``p`` is that function at ``u = p``.
"""
from __future__ import annotations

import math

import numpy as np

from .structural import PopulationSpec

WAGE = 10.0
TAX_T = 0.5
GUARANTEE = 300.0
NU_MEAN, NU_SD = 100.0, 20.0
MEAN_HOURS = 25.0
AGE_EFFECT, BLACK_EFFECT = 0.1, -2.0
MEAN_AGE = 37.5


def u_shaped_response(u, depth: float = 30.0, center: float = 0.42, width: float = 0.12, floor: float = 2.0):
    """True marginal response in the U-shaped world (hrs/wk, negative)."""
    u = np.asarray(u, dtype=np.float64)
    return -(floor + depth * np.exp(-(((u - center) / width) ** 2)))


def _profile_points(response, n: int = 401):
    u = np.linspace(0.0, 1.0, n)
    theta2 = TAX_T * WAGE / -np.asarray(response(u), dtype=np.float64)
    return [[float(a), float(b)] for a, b in zip(u, theta2)]


def base_config(
    n_states: int = 50,
    agents_per_state: int = 4000,
    seed: int = 0,
    kappa1: float = 32.0,
    instrument_sd: float = 0.5,
    n_barriers: int = 1,
    barrier_noise: float = 0.0,
    mean_participation: float = 0.45,
) -> dict:
    """Config mapping for a constant-response world (response ``-8``).

    ``kappa0`` is set so the participation rate at the mean instrument and
    mean covariates is about ``mean_participation``.
    """
    dv = GUARANTEE - TAX_T * WAGE * MEAN_HOURS
    from scipy.stats import norm

    kappa0 = dv - NU_MEAN - NU_SD * float(norm.ppf(mean_participation))
    return {
        "preferences": {
            "theta1": {
                "anchor_hours": {"family": "constant", "value": MEAN_HOURS - AGE_EFFECT * MEAN_AGE},
                "anchor_wage": WAGE * (1.0 - TAX_T / 2.0),
            },
            "theta2": TAX_T * WAGE / 8.0,
            "theta3": 0.0,
            "nu": {"family": "normal", "mean": NU_MEAN, "sd": NU_SD},
            "covariate_effects": {"age": AGE_EFFECT, "black": BLACK_EFFECT},
        },
        "cost": {"kappa0": kappa0, "kappa1": kappa1},
        "instrument": {
            "log_mean": 0.0,
            "log_sd": instrument_sd,
            "n_barriers": n_barriers,
            "noise_sd": [barrier_noise] * n_barriers,
        },
        "program": {"g": GUARANTEE, "t": TAX_T, "r": 0.0},
        "wages": {"intercept": math.log(WAGE)},
        "nonlabor": {"prob_zero": 1.0},
        "n_states": n_states,
        "agents_per_state": agents_per_state,
        "seed": seed,
    }


def homogeneous_world(delta: float = -8.0, **kw) -> PopulationSpec:
    cfg = base_config(**kw)
    cfg["preferences"]["theta2"] = TAX_T * WAGE / -delta
    return PopulationSpec.from_dict(cfg)


def u_shaped_world(**kw) -> PopulationSpec:
    cfg = base_config(**kw)
    cfg["preferences"]["theta2"] = {"family": "profile", "points": _profile_points(u_shaped_response)}
    return PopulationSpec.from_dict(cfg)


def null_instrument_world(**kw) -> PopulationSpec:
    """Barriers vary across states but do not enter the cost."""
    kw = dict(kw, kappa1=0.0)
    cfg = base_config(**kw)
    cfg["preferences"]["theta2"] = {"family": "profile", "points": _profile_points(u_shaped_response)}
    return PopulationSpec.from_dict(cfg)


def ineligible_world(**kw) -> PopulationSpec:
    """Same population without a program: nobody participates and hours
    do not depend on the barriers."""
    cfg = base_config(**kw)
    cfg["preferences"]["theta2"] = {"family": "profile", "points": _profile_points(u_shaped_response)}
    cfg["program"] = {"g": 0.0, "t": TAX_T, "r": 0.0}
    return PopulationSpec.from_dict(cfg)


# estimator settings matching the worlds' observables
WORLD_PIPELINE = dict(
    x_terms=("const", "age", "black"),
    z_terms=("zindex",),
    beta_terms=("const", "age", "black"),
    lambda_terms=(),
    wage_terms=("const", "age", "black"),
)
