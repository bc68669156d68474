import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from welfare_mte.errors import ConfigurationError, InvalidInputError
from welfare_mte.spline import SplineBasis, natural_spline_basis


def g_of(basis, coef, F, d=0):
    return natural_spline_basis(basis, F, d) @ coef


class TestBasis:
    def test_below_first_knot_is_linear(self):
        b = SplineBasis.equally_spaced(5)
        for F in (0.0, 0.1, 0.25):
            v = natural_spline_basis(b, F)
            assert np.allclose(v, [1.0, F, 0, 0, 0])

    def test_values_at_last_knot(self):
        # with cubed truncated powers d_k(pi_J) = (pi_J - pi_k)**2
        b = SplineBasis((0.2, 0.4, 0.5, 0.8))
        k = np.array(b.knots)
        v = natural_spline_basis(b, 0.8)
        d = (k[-1] - k[:-1]) ** 2
        assert np.allclose(v[2:], d[:-1] - d[-1], atol=1e-15)

    def test_shape_and_names(self):
        b = SplineBasis.equally_spaced(6)
        assert natural_spline_basis(b, np.linspace(0, 1, 7)).shape == (7, 6)
        assert b.names() == ["g1", "g2", "g3", "g4", "g5", "g6"]

    def test_equally_spaced_endpoints(self):
        b = SplineBasis.equally_spaced(5, (0.25, 0.66))
        assert b.knots[0] == 0.25 and b.knots[-1] == pytest.approx(0.66)

    @pytest.mark.parametrize("knots", [(0.2, 0.5), (0.5, 0.4, 0.6), (0.0, 0.5, 0.7), (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)])
    def test_bad_knots(self, knots):
        with pytest.raises(ConfigurationError):
            SplineBasis(knots)

    def test_two_knots_rejected(self):
        with pytest.raises(ConfigurationError):
            SplineBasis.equally_spaced(2)

    def test_argument_domain(self):
        with pytest.raises(InvalidInputError):
            natural_spline_basis(SplineBasis.equally_spaced(4), 1.2)


@pytest.mark.parametrize("J", [3, 4, 5, 6])
class TestSmoothness:
    def setup_method(self):
        self.rng = np.random.default_rng(11)

    def test_derivatives_match_finite_differences(self, J):
        b = SplineBasis.equally_spaced(J)
        F = np.linspace(0.05, 0.95, 37)
        h = 1e-6
        for d in (1, 2):
            fd = (natural_spline_basis(b, F + h, d - 1) - natural_spline_basis(b, F - h, d - 1)) / (2 * h)
            assert np.allclose(natural_spline_basis(b, F, d), fd, atol=1e-5)

    def test_continuity_at_interior_knots(self, J):
        b = SplineBasis.equally_spaced(J)
        coef = self.rng.normal(size=J)
        eps = 1e-6
        for k in b.knots[1:-1]:
            for d in (0, 1, 2):
                left = g_of(b, coef, k - eps, d)
                right = g_of(b, coef, k + eps, d)
                scale = max(1.0, abs(g_of(b, coef, k, d)))
                assert abs(left - right) / scale < 1e-4

    def test_linear_outside_boundary_knots(self, J):
        b = SplineBasis.equally_spaced(J)
        coef = self.rng.normal(size=J)
        h = 1e-4
        for F in (0.02, 0.1, 0.2, 0.7, 0.85, 0.98):
            fd2 = (g_of(b, coef, F + h) - 2 * g_of(b, coef, F) + g_of(b, coef, F - h)) / h**2
            assert abs(fd2) < 1e-6
            assert abs(g_of(b, coef, F, 2)) < 1e-12

    def test_spans_natural_interpolant(self, J):
        # any natural cubic spline on these knots is a combination of the basis
        b = SplineBasis.equally_spaced(J)
        k = np.array(b.knots)
        y = self.rng.normal(size=J)
        coef = np.linalg.solve(natural_spline_basis(b, k), y)
        F = np.linspace(k[0], k[-1], 101)
        ref = CubicSpline(k, y, bc_type="natural")(F)
        assert np.allclose(g_of(b, coef, F), ref, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=3, max_size=8, unique=True), st.floats(0, 1))
def test_basis_finite_everywhere(knots, F):
    knots = sorted(knots)
    if min(np.diff(knots)) < 1e-3:
        return
    v = natural_spline_basis(SplineBasis(tuple(knots)), F)
    assert np.all(np.isfinite(v))
    assert v[0] == 1.0 and v[1] == F
