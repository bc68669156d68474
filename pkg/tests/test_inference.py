import numpy as np
import pytest

from welfare_mte import worlds
from welfare_mte.dataset import Dataset
from welfare_mte.errors import BootstrapAbortError, InvalidInputError, SchemaError
from welfare_mte.estimation import PipelineConfig, fit_pipeline
from welfare_mte.inference import (
    ClusterSampler,
    block_bootstrap,
    falsification_run,
    gcv_score,
    gcv_select,
    gps_balance,
    homogeneity_test,
    percentile_band,
    segment_f_stats,
)
from welfare_mte.probit import prepare
from welfare_mte.structural import simulate_population

CFG = PipelineConfig(**worlds.WORLD_PIPELINE)


@pytest.fixture(scope="module")
def small_u():
    return simulate_population(worlds.u_shaped_world(n_states=25, agents_per_state=200, seed=21))


@pytest.fixture(scope="module")
def small_boot(small_u):
    return block_bootstrap(small_u, CFG, B=60, seed=5, workers=1)


class TestSampler:
    def test_whole_clusters_relabeled(self):
        d = Dataset({"cluster_id": np.repeat([3.0, 7.0, 9.0], [2, 3, 4]), "v": np.arange(9.0)})
        s = ClusterSampler(d)
        (rep,) = s.draw(np.random.default_rng(0))
        labels = np.unique(rep["cluster_id"])
        assert set(labels) <= {0.0, 1.0, 2.0}
        for lab in labels:
            v = rep["v"][rep["cluster_id"] == lab]
            assert any(np.array_equal(v, d["v"][d["cluster_id"] == c]) for c in (3.0, 7.0, 9.0))

    def test_joint_draw_uses_same_clusters(self):
        a = Dataset({"cluster_id": np.repeat([1.0, 2.0, 3.0, 4.0], 3), "v": np.repeat([1.0, 2.0, 3.0, 4.0], 3)})
        b = Dataset({"cluster_id": np.repeat([1.0, 2.0, 3.0, 4.0], 2), "v": np.repeat([1.0, 2.0, 3.0, 4.0], 2)})
        ra, rb = ClusterSampler(a, b).draw(np.random.default_rng(3))
        assert np.array_equal(np.unique(ra["v"]), np.unique(rb["v"]))

    def test_one_row_per_cluster(self):
        d = Dataset({"cluster_id": np.arange(50.0), "v": np.arange(50.0)})
        (rep,) = ClusterSampler(d).draw(np.random.default_rng(1))
        assert rep.n == 50 and np.array_equal(rep["cluster_id"], np.arange(50.0))


class TestBootstrap:
    def test_band_shape(self, small_boot):
        c = small_boot.curve
        assert c.has_band and c.lo.shape == c.mte.shape
        assert np.all(c.lo <= c.hi)
        assert small_boot.n_ok == 60 and not small_boot.failures

    def test_independent_of_workers(self, small_u, small_boot):
        again = block_bootstrap(small_u, CFG, B=60, seed=5, workers=2)
        assert np.array_equal(again.curves, small_boot.curves)
        assert np.array_equal(again.lo, small_boot.lo)

    def test_seed_changes_draws(self, small_u, small_boot):
        other = block_bootstrap(small_u, CFG, B=60, seed=6, workers=1)
        assert not np.array_equal(other.curves, small_boot.curves)

    def test_few_replicates_no_band(self, small_u):
        b = block_bootstrap(small_u, CFG, B=10, seed=0, workers=1)
        assert b.lo is None and not b.curve.has_band

    def test_abort_when_most_fail(self, small_u):
        bad = small_u.with_columns({"black": np.zeros(small_u.n)})
        fit = fit_pipeline(small_u, CFG)
        with pytest.raises(BootstrapAbortError):
            block_bootstrap(bad, CFG, B=10, seed=0, workers=1, estimate=fit)

    def test_needs_clusters(self):
        with pytest.raises(SchemaError):
            block_bootstrap(Dataset({"hours": np.ones(3)}), CFG, B=5)

    def test_percentile_band(self):
        reps = np.arange(1, 1001, dtype=float)[:, None]
        lo, hi = percentile_band(reps)
        assert lo[0] == pytest.approx(25.975) and hi[0] == pytest.approx(975.025)


class TestHomogeneity:
    def test_u_world_rejects(self, small_boot):
        h = homogeneity_test(small_boot)
        assert h.reject and h.p_value < 0.05

    def test_flat_world_calm(self):
        d = simulate_population(worlds.homogeneous_world(n_states=25, agents_per_state=200, seed=22))
        h = homogeneity_test(block_bootstrap(d, CFG, B=60, seed=1, workers=1))
        assert h.statistic < 2 * h.critical_value

    def test_needs_replicates(self, small_u):
        b = block_bootstrap(small_u, CFG, B=1, seed=0, workers=1)
        with pytest.raises(InvalidInputError):
            homogeneity_test(b)


class TestGcv:
    def test_score(self):
        assert gcv_score(100.0, 100, 10) == pytest.approx(1.0 / 0.81)
        with pytest.raises(InvalidInputError):
            gcv_score(1.0, 5, 5)

    def test_rss_falls_for_nested_knots(self, small_u):
        # equally spaced knot sets nest for J = 3 -> 5 and 4 -> 7
        fit = fit_pipeline(small_u, CFG)
        rep = gcv_select(fit.data, fit.fhat, (3, 4, 5, 6, 7), config=CFG)
        rss = {r["J"]: r["rss"] for r in rep.rows}
        assert rss[5] <= rss[3] * (1 + 1e-12) and rss[7] <= rss[4] * (1 + 1e-12)
        best = min(rep.rows, key=lambda r: r["gcv"])
        assert rep.selected == best["J"]

    def test_linear_truth_prefers_few_knots(self):
        rng = np.random.default_rng(0)
        n = 4000
        F = rng.uniform(0.1, 0.9, n)
        d = Dataset({"hours": 20 - 8 * F + rng.normal(scale=3, size=n)})
        rep = gcv_select(d, F, (3, 4, 5, 6), ("const",), ())
        assert rep.selected == 3


class TestSegmentF:
    def test_null_instrument_near_one(self):
        fs = []
        for s in range(15):
            d = simulate_population(worlds.null_instrument_world(n_states=30, agents_per_state=200, seed=300 + s))
            fit = fit_pipeline(d, CFG)
            dd = prepare(fit.data, fit.first_stage)
            fs.extend(segment_f_stats(dd, fit.fhat, CFG.x_terms, CFG.z_terms).f_stats)
        assert 0.5 < np.mean(fs) < 1.6

    def test_strong_instrument(self, small_u):
        fit = fit_pipeline(small_u, CFG)
        dd = prepare(fit.data, fit.first_stage)
        s = segment_f_stats(dd, fit.fhat, CFG.x_terms, CFG.z_terms, breaks="quartiles")
        assert len(s.rows) == 4 and s.counts.sum() == small_u.n
        assert np.max(s.f_stats) > 10

    def test_constant_instrument_zero(self):
        rng = np.random.default_rng(0)
        n = 300
        d = Dataset({"participates": (rng.uniform(size=n) < 0.5).astype(float), "age": rng.normal(size=n),
                     "zz": np.ones(n)})
        s = segment_f_stats(d, rng.uniform(size=n), ("const", "age"), ("zz",))
        assert np.all(s.f_stats == 0) and all("constant" in r["flag"] for r in s.rows)

    def test_bad_breaks(self, small_u):
        with pytest.raises(InvalidInputError):
            segment_f_stats(small_u, np.full(small_u.n, 0.5), ("const",), ("age",), breaks="deciles")


class TestGps:
    def setup_method(self):
        rng = np.random.default_rng(2)
        n = 6000
        self.age = rng.uniform(20, 55, n)
        self.black = (rng.uniform(size=n) < 0.3).astype(float)
        self.rng = rng

    def test_independent_instrument_balanced(self):
        z = self.rng.normal(size=self.age.size)
        d = Dataset({"age": self.age, "black": self.black, "z": z})
        rep = gps_balance(d, "z", ["age", "black"])
        assert rep.n_tests == 6 and rep.significant_before <= 2

    def test_conditioning_removes_linear_dependence(self):
        z = 0.05 * self.age + self.rng.normal(size=self.age.size)
        d = Dataset({"age": self.age, "black": self.black, "z": z})
        rep = gps_balance(d, "z", ["age", "black"])
        assert rep.significant_before >= 2
        assert np.max(np.abs(rep.t_after[:, 0])) < np.max(np.abs(rep.t_before[:, 0]))

    def test_constant_covariate(self):
        d = Dataset({"age": self.age, "one": np.ones(self.age.size), "z": self.rng.normal(size=self.age.size)})
        rep = gps_balance(d, "z", ["age", "one"])
        assert np.all(rep.t_before[:, 1] == 0) and np.all(rep.t_after[:, 1] == 0)

    def test_deterministic_instrument(self):
        d = Dataset({"age": self.age, "z": 2 * self.age})
        with pytest.raises(InvalidInputError):
            gps_balance(d, "z", ["age"])


class TestFalsification:
    def test_ineligible_covers_zero(self, small_u):
        inel = simulate_population(worlds.ineligible_world(n_states=25, agents_per_state=200, seed=23))
        c = falsification_run(small_u, inel, CFG, B=60, seed=1, workers=1)
        assert c.has_band
        assert np.mean(c.covers(np.zeros_like(c.mte))) >= 0.8

    def test_self_is_estimate(self, small_u):
        c = falsification_run(small_u, small_u, CFG, B=0)
        assert np.allclose(c.mte, fit_pipeline(small_u, CFG).curve.mte)

    def test_empty_sample(self, small_u):
        with pytest.raises(InvalidInputError):
            falsification_run(small_u, small_u.take(np.array([], dtype=int)), CFG, B=0)

    def test_schema_mismatch(self, small_u):
        inel = Dataset({k: small_u[k] for k in small_u.names if k not in ("age",) and not k.startswith("oracle_")})
        with pytest.raises(SchemaError, match="age"):
            falsification_run(small_u, inel, CFG, B=0)
