import warnings

import numpy as np
import pytest
from scipy.optimize import least_squares

from welfare_mte import worlds
from welfare_mte.dataset import Dataset
from welfare_mte.design import instrument_index
from welfare_mte.errors import InvalidInputError, OutOfSupportError, RankDeficiencyError
from welfare_mte.estimation import (
    OUTCOMES,
    PipelineConfig,
    fit_pipeline,
    homogeneous_iv_fit,
    impute_wages,
    mte_by_outcome,
    mte_eval,
    second_stage_design,
    second_stage_fit,
    wage_fit,
)
from welfare_mte.spline import SplineBasis
from welfare_mte.structural import simulate_population, true_mte_curve

WINDOW = (0.25, 0.66)


def synthetic(n=20_000, seed=0, g=lambda F: -10 + 8 * F, noise=1.0):
    """hours = 20 + 0.1 age + lam*(x - mean) * F + F g(F) + e"""
    rng = np.random.default_rng(seed)
    F = rng.uniform(0.05, 0.95, n)
    age = rng.uniform(20, 55, n)
    x = rng.normal(2.0, 1.0, n)
    hours = 20 + 0.1 * age + 1.5 * (x - x.mean()) * F + F * g(F) + rng.normal(scale=noise, size=n)
    data = Dataset({"hours": hours, "age": age, "x": x, "cluster_id": rng.integers(0, 40, n).astype(float)})
    return data, F


class TestInstrumentIndex:
    def test_single_column(self):
        z = np.exp(np.linspace(-1, 1, 10))
        idx, w = instrument_index([z])
        assert np.allclose(idx, np.log(z)) and w.tolist() == [1.0]

    def test_simple_weights(self):
        a, b = np.exp([0.0, 1.0, 2.0]), np.exp([1.0, 1.0, 4.0])
        idx, w = instrument_index([a, b], "simple")
        assert np.allclose(w, 0.5) and np.allclose(idx, [0.5, 1.0, 3.0])

    def test_inverse_variance(self):
        rng = np.random.default_rng(0)
        a = np.exp(rng.normal(scale=1.0, size=5000))
        b = np.exp(rng.normal(scale=2.0, size=5000))
        _, w = instrument_index([a, b])
        va, vb = np.var(np.log(a), ddof=1), np.var(np.log(b), ddof=1)
        assert np.allclose(w, np.array([1 / va, 1 / vb]) / (1 / va + 1 / vb))
        assert w[0] == pytest.approx(0.8, abs=0.02)

    def test_nonpositive_column(self):
        with pytest.raises(InvalidInputError, match="z2"):
            instrument_index([np.ones(3), np.array([1.0, 0.0, 2.0])], names=["z1", "z2"])

    def test_constant_column_inverse_variance(self):
        with pytest.raises(InvalidInputError):
            instrument_index([np.exp(np.arange(4.0)), np.ones(4)])


class TestSecondStage:
    def test_recovers_quadratic_response(self):
        # F g(F) = -10F + 8F^2 gives an MTE of -10 + 16F
        data, F = synthetic(noise=0.5)
        m = second_stage_fit(data, F, ["const", "age"], ["x"], window=WINDOW)
        grid = np.linspace(*WINDOW, 21)
        assert np.allclose(mte_eval(m, grid), -10 + 16 * grid, atol=0.3)
        assert m.lam[0] == pytest.approx(1.5, abs=0.05)
        assert m.beta[1] == pytest.approx(0.1, abs=0.01)

    def test_matches_nonlinear_least_squares(self):
        data, F = synthetic(n=3000, seed=2)
        basis = SplineBasis.equally_spaced(4, WINDOW)
        m = second_stage_fit(data, F, ["const", "age"], ["x"], basis, window=WINDOW)
        X, _ = second_stage_design(data, F, ["const", "age"], ["x"], basis)
        y = data["hours"]
        ref = least_squares(lambda b: X @ b - y, np.zeros(X.shape[1]), xtol=1e-14, ftol=1e-14, gtol=1e-14)
        assert np.allclose(m.coef, ref.x, rtol=1e-6, atol=1e-6)
        assert m.rss == pytest.approx(float(np.sum((X @ ref.x - y) ** 2)), rel=1e-9)

    def test_centering_invariance(self):
        data, F = synthetic(n=5000, seed=3)
        shifted = data.with_columns({"x": data["x"] + 100.0})
        a = second_stage_fit(data, F, ["const", "age"], ["x"], window=WINDOW)
        b = second_stage_fit(shifted, F, ["const", "age"], ["x"], window=WINDOW)
        grid = np.linspace(*WINDOW, 9)
        assert np.allclose(mte_eval(a, grid), mte_eval(b, grid), atol=1e-7)
        assert b.centering["x"] == pytest.approx(a.centering["x"] + 100.0)

    def test_lambda_shifts_curve(self):
        data, F = synthetic(n=5000, seed=4)
        m = second_stage_fit(data, F, ["const", "age"], ["x"], window=WINDOW)
        at_mean = mte_eval(m, 0.4)
        moved = mte_eval(m, 0.4, x_at={"x": m.centering["x"] + 1.0})
        assert moved - at_mean == pytest.approx(m.lam[0], rel=1e-12)

    def test_mte_is_derivative_of_f_g(self):
        data, F = synthetic(n=4000, seed=5, g=lambda F: np.sin(5 * F))
        m = second_stage_fit(data, F, ["const", "age"], [], window=WINDOW)
        grid = np.linspace(0.27, 0.64, 15)
        h = 1e-6
        fd = ((grid + h) * m.g(grid + h) - (grid - h) * m.g(grid - h)) / (2 * h)
        assert np.allclose(mte_eval(m, grid), fd, atol=1e-5)

    def test_outside_window(self):
        data, F = synthetic(n=2000)
        m = second_stage_fit(data, F, ["const"], [], window=WINDOW)
        with pytest.raises(OutOfSupportError) as exc:
            mte_eval(m, 0.8)
        assert exc.value.support == WINDOW

    def test_constant_fhat_rank(self):
        data, _ = synthetic(n=500)
        with pytest.raises(RankDeficiencyError):
            second_stage_fit(data, np.full(500, 0.4), ["const", "age"], [], window=WINDOW)

    def test_flat_world_gives_flat_curve(self):
        data, F = synthetic(g=lambda F: np.full_like(F, -8.0), noise=2.0)
        m = second_stage_fit(data, F, ["const", "age"], [], window=WINDOW)
        assert np.allclose(mte_eval(m, np.linspace(*WINDOW, 11)), -8, atol=0.6)


class TestOutcomes:
    def setup_method(self):
        rng = np.random.default_rng(7)
        n = 6000
        F = rng.uniform(0.1, 0.9, n)
        part = rng.uniform(size=n) < F
        hours = np.where(part, rng.choice([0.0, 20.0, 40.0], n, p=[0.5, 0.3, 0.2]), rng.choice([0.0, 20.0, 40.0], n))
        self.data = Dataset({"hours": hours, "age": rng.uniform(20, 50, n)})
        self.F = F

    def test_curves_sum_to_zero(self):
        curves = [mte_by_outcome(self.data, self.F, o, ["const", "age"], [], window=WINDOW) for o in OUTCOMES]
        total = sum(c.mte for c in curves)
        assert np.max(np.abs(total)) < 1e-8

    def test_categories(self):
        c = mte_by_outcome(self.data, self.F, "nonwork", ["const", "age"], [], window=WINDOW)
        assert not c.flags["degenerate"]
        assert c.flags["share"] == pytest.approx(np.mean(self.data["hours"] == 0))

    def test_all_workers_degenerate(self):
        data = self.data.with_columns({"hours": np.full(self.data.n, 40.0)})
        c = mte_by_outcome(data, self.F, "nonwork", ["const", "age"], [], window=WINDOW)
        assert c.flags["degenerate"] and np.all(c.mte == 0)
        c = mte_by_outcome(data, self.F, "full-time", ["const", "age"], [], window=WINDOW)
        assert c.flags["degenerate"] and np.all(c.mte == 0)

    def test_full_time_to_nonwork(self):
        # participants never work, nonparticipants work full time
        rng = np.random.default_rng(1)
        F = rng.uniform(0.1, 0.9, 200_000)
        part = rng.uniform(size=F.size) < F
        data = Dataset({"hours": np.where(part, 0.0, 40.0), "age": rng.uniform(20, 50, F.size)})
        nw = mte_by_outcome(data, F, "nonwork", ["const", "age"], [], window=WINDOW)
        ft = mte_by_outcome(data, F, "full-time", ["const", "age"], [], window=WINDOW)
        pt = mte_by_outcome(data, F, "part-time", ["const", "age"], [], window=WINDOW)
        assert np.allclose(nw.mte, 1.0, atol=0.1)
        assert np.allclose(ft.mte, -1.0, atol=0.1)
        assert pt.flags["degenerate"]

    def test_unknown_outcome(self):
        with pytest.raises(InvalidInputError):
            mte_by_outcome(self.data, self.F, "overtime", ["const"], [], window=WINDOW)


def wage_data(n=20_000, rho=0.0, seed=0):
    rng = np.random.default_rng(seed)
    age = rng.uniform(20, 55, n)
    kids = rng.integers(0, 3, n).astype(float)
    e = rng.multivariate_normal([0, 0], [[0.25, 0.5 * rho], [0.5 * rho, 1.0]], size=n)
    lw = 2.0 + 0.01 * age + e[:, 0]
    work = (0.5 - 0.6 * kids + 0.01 * age + e[:, 1]) > 0
    return Dataset({"log_wage": np.where(work, lw, np.nan), "age": age, "kids": kids,
                    "hours": np.where(work, 35.0, 0.0)})


class TestWages:
    terms = ("const", "age")
    sel = ("const", "age", "kids")

    def test_ols_recovers_without_selection(self):
        m = wage_fit(wage_data(), "ols", self.terms)
        assert m.gamma == pytest.approx([2.0, 0.01], abs=0.03)

    def test_heckman_no_selection_small_mills(self):
        m = wage_fit(wage_data(), "heckman", self.terms, self.sel)
        assert m.mode == "heckman"
        assert abs(m.mills_coef) < 0.05

    def test_heckman_corrects_selection(self):
        d = wage_data(rho=0.8, seed=1)
        ols = wage_fit(d, "ols", self.terms)
        hk = wage_fit(d, "heckman", self.terms, self.sel)
        assert hk.mills_coef == pytest.approx(0.4, abs=0.06)
        assert abs(hk.gamma[0] - 2.0) < abs(ols.gamma[0] - 2.0)

    def test_fallback_when_everyone_works(self):
        d = wage_data()
        d = d.with_columns({"log_wage": np.where(np.isfinite(d["log_wage"]), d["log_wage"], 2.0)})
        with pytest.warns(RuntimeWarning):
            m = wage_fit(d, "heckman", self.terms, self.sel)
        assert m.mode == "ols" and "fallback" in m.flags

    def test_too_few_workers(self):
        d = wage_data(n=40)
        with pytest.raises(InvalidInputError):
            wage_fit(d.with_columns({"log_wage": np.full(40, np.nan)}), "ols", self.terms)

    def test_impute_keeps_observed(self):
        d = wage_data(n=2000)
        m = wage_fit(d, "ols", self.terms)
        out = impute_wages(d, m)
        obs = np.isfinite(d["log_wage"])
        assert np.array_equal(out["log_wage"][obs], d["log_wage"][obs])
        assert np.all(np.isfinite(out["log_wage"]))
        miss = ~obs
        assert np.allclose(out["log_wage"][miss], m.gamma[0] + m.gamma[1] * d["age"][miss])


@pytest.fixture(scope="module")
def homogeneous_fit():
    data = simulate_population(worlds.homogeneous_world(n_states=40, agents_per_state=500, seed=3))
    return fit_pipeline(data, PipelineConfig(**worlds.WORLD_PIPELINE))


@pytest.fixture(scope="module")
def u_fit():
    spec = worlds.u_shaped_world(n_states=50, agents_per_state=1000, seed=4)
    cfg = PipelineConfig(**worlds.WORLD_PIPELINE)
    return fit_pipeline(simulate_population(spec), cfg), true_mte_curve(spec, cfg.grid, n_draws=400_000)


class TestPipeline:
    def test_homogeneous_iv_near_truth(self, homogeneous_fit):
        iv = homogeneous_fit.iv
        assert abs(iv.effect + 8.0) < 4 * iv.se
        assert 0 < iv.se < 2

    def test_homogeneous_curve_flat(self, homogeneous_fit):
        assert np.all(np.abs(homogeneous_fit.curve.mte + 8.0) < 5.0)

    def test_oracle_columns_ignored(self, homogeneous_fit):
        assert not homogeneous_fit.data.oracle_names

    def test_u_world_iv_between_extremes(self, u_fit):
        fit, orc = u_fit
        assert orc.mte.min() < fit.iv.effect < orc.mte.max()

    def test_u_world_curve_tracks_oracle(self, u_fit):
        fit, orc = u_fit
        err = np.abs(fit.curve.mte - orc.mte)
        assert np.mean(err < 0.25 * np.ptp(orc.mte)) >= 0.8

    def test_homoskedastic_vs_cluster_se(self, homogeneous_fit):
        a = homogeneous_iv_fit(homogeneous_fit.data, homogeneous_fit.fhat, ("const", "age", "black"), cluster=False)
        assert a.effect == homogeneous_fit.iv.effect
        assert a.se > 0

    def test_deterministic(self):
        data = simulate_population(worlds.homogeneous_world(n_states=20, agents_per_state=200, seed=9))
        cfg = PipelineConfig(**worlds.WORLD_PIPELINE)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            a, b = fit_pipeline(data, cfg), fit_pipeline(data, cfg)
        assert np.array_equal(a.curve.mte, b.curve.mte)

    def test_bad_window(self):
        from welfare_mte.errors import ConfigurationError

        with pytest.raises(ConfigurationError):
            PipelineConfig(window=(0.7, 0.3))
