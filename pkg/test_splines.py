import numpy as np
import pytest

from app.core.services.splines import BasisSpec, SplineBases, build_spline_bases, eval_basis, eval_derivative, place_knots


class TestEvalBasis:
    def test_below_knot(self):
        np.testing.assert_array_equal(eval_basis(BasisSpec(2, (1.0,)), 0.5), [1.0, 0.5, 0.25, 0.0])

    def test_above_knot(self):
        np.testing.assert_array_equal(eval_basis(BasisSpec(2, (1.0,)), 2.0), [1.0, 2.0, 4.0, 1.0])

    def test_at_knot_is_zero(self):
        np.testing.assert_array_equal(eval_basis(BasisSpec(2, (1.0, 3.0)), 1.0), [1.0, 1.0, 1.0, 0.0, 0.0])

    def test_array_input_keeps_shape(self):
        spec = BasisSpec(2, (0.0, 1.0))
        points = np.linspace(-1.0, 2.0, 12).reshape(3, 4)
        rows = eval_basis(spec, points)
        assert rows.shape == (3, 4, spec.dimension)
        np.testing.assert_array_equal(rows[1, 2], eval_basis(spec, points[1, 2]))

    def test_pure(self):
        spec = BasisSpec(3, (0.2, 0.9))
        np.testing.assert_array_equal(eval_basis(spec, 0.7), eval_basis(spec, 0.7))

    def test_rejects_unsorted_knots(self):
        with pytest.raises(ValueError):
            BasisSpec(2, (1.0, 0.5))


class TestEvalDerivative:
    def test_above_knot(self):
        np.testing.assert_array_equal(eval_derivative(BasisSpec(2, (1.0,)), 2.0), [0.0, 1.0, 4.0, 2.0])

    def test_below_knot(self):
        np.testing.assert_array_equal(eval_derivative(BasisSpec(2, (1.0,)), 0.5), [0.0, 1.0, 1.0, 0.0])

    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_central_difference_at_fixed_point(self, degree):
        spec = BasisSpec(degree, (-1.0, 0.5, 1.2))
        step = 1e-5
        numeric = (eval_basis(spec, 1.7 + step) - eval_basis(spec, 1.7 - step)) / (2.0 * step)
        np.testing.assert_allclose(eval_derivative(spec, 1.7), numeric, rtol=1e-6, atol=1e-8)

    def test_central_difference_at_random_points(self):
        spec = BasisSpec(2, (-1.0, 0.5, 2.0))
        points = np.random.default_rng(3).uniform(-3.0, 3.0, size=100)
        step = 1e-5
        numeric = (eval_basis(spec, points + step) - eval_basis(spec, points - step)) / (2.0 * step)
        np.testing.assert_allclose(eval_derivative(spec, points), numeric, rtol=1e-6, atol=1e-8)

    def test_continuity_at_knots(self):
        spec = BasisSpec(2, (0.5, 1.5))
        for knot in spec.knots:
            gaps = []
            for eps in (1e-2, 1e-4, 1e-6):
                value_gap = np.max(np.abs(eval_basis(spec, knot - eps) - eval_basis(spec, knot + eps)))
                slope_gap = np.max(np.abs(eval_derivative(spec, knot - eps) - eval_derivative(spec, knot + eps)))
                gaps.append(value_gap + slope_gap)
            assert gaps[0] > gaps[1] > gaps[2]
            assert gaps[2] < 1e-4


class TestPlaceKnots:
    def test_includes_zero(self):
        knots = place_knots(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), 3, include_zero=True)
        assert 0.0 in knots
        assert list(knots) == sorted(set(knots))

    def test_constant_times_collapse(self, jm_caplog):
        assert place_knots(np.full(8, 4.0), 3) == (4.0,)
        assert "Collapsed" in jm_caplog.text

    def test_order_statistic_quantiles(self):
        knots = place_knots(np.arange(-10.0, 11.0), 5, include_zero=True)
        assert knots == (-7.0, -4.0, 0.0, 3.0, 7.0)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            place_knots(np.array([]), 2)


class TestSplineBases:
    def test_toy_cohort(self, toy_cohort, small_splines):
        bases = build_spline_bases(toy_cohort, small_splines)
        assert 0.0 in bases.population_responder.knots
        assert bases.individual_responder.knots == (0.0,)
        assert bases.dim_phi == 4
        assert bases.dim_psi == 4
        for i in range(toy_cohort.size):
            if toy_cohort.responder[i]:
                assert bases.individual_nonresponder[i] is None
            else:
                times = toy_cohort.t[i]
                midpoint = 0.5 * (times[0] + times[-1]) / small_splines.time_scale
                assert bases.individual_basis(i, False).knots == (midpoint,)

    def test_payload_round_trip(self, toy_cohort, small_splines):
        bases = build_spline_bases(toy_cohort, small_splines)
        assert SplineBases.from_payload(bases.to_payload()) == bases
