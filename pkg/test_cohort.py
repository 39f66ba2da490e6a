import math

import numpy as np
import pytest

from app.core.errors import CohortValidationError, JointModelError, SupportViolationError
from app.core.models.cohort_models import LatentState
from app.core.services.cohort_service import (
    assert_support,
    h_bounds,
    init_latent,
    support_violations,
    validate_cohort,
    w_bounds,
)


class TestValidateCohort:
    def test_reversed_h_interval(self, make_subject, hp):
        bad = make_subject("A", 1, 100.0, 90.0, 200.0, 300.0, times=[120.0], ys=[1.0])
        with pytest.raises(CohortValidationError, match="l_h < r_h violated") as info:
            validate_cohort([bad], hp)
        assert info.value.exit_code == 2

    def test_right_censored_is_nonresponder(self, make_subject, hp):
        cohort = validate_cohort([make_subject("A", 0, 0.0, 180.0, 360.0, math.inf)], hp)
        assert not cohort.responder[0]

    def test_valid_pair(self, make_subject, hp):
        subjects = [
            make_subject("A", 1, 0.0, 180.0, 180.0, 360.0),
            make_subject("B", 0, 0.0, 180.0, 360.0, math.inf),
        ]
        cohort = validate_cohort(subjects, hp)
        assert cohort.size == 2
        assert cohort.responder.tolist() == [True, False]
        assert cohort.covariate_names == ("x0",)

    def test_idempotent(self, toy_cohort, hp):
        again = validate_cohort(toy_cohort, hp)
        assert again.ids == toy_cohort.ids
        assert again.covariate_names == toy_cohort.covariate_names
        np.testing.assert_array_equal(again.responder, toy_cohort.responder)
        np.testing.assert_array_equal(again.x_star, toy_cohort.x_star)
        np.testing.assert_array_equal(again.r_v, toy_cohort.r_v)

    def test_collects_every_problem(self, make_subject, hp):
        subjects = [
            make_subject("A", 1, 0.0, 180.0, 180.0, 360.0),
            make_subject("A", 1, 0.0, 180.0, 180.0, 360.0),
            make_subject("B", 1, 0.0, 180.0, 300.0, 200.0),
            make_subject("C", 1, 0.0, 180.0, 180.0, 360.0, times=[200.0, 190.0], ys=[1.0, 2.0]),
        ]
        with pytest.raises(CohortValidationError) as info:
            validate_cohort(subjects, hp)
        text = " | ".join(info.value.messages)
        assert "duplicate id" in text
        assert "l_v < r_v violated" in text
        assert "strictly increasing" in text

    def test_requires_observations(self, make_subject, hp):
        subject = make_subject("A", 1, 0.0, 180.0, 180.0, 360.0, times=[], ys=[])
        with pytest.raises(CohortValidationError, match="at least one observation"):
            validate_cohort([subject], hp)

    def test_missing_group_warns(self, make_subject, hp, jm_caplog):
        cohort = validate_cohort([make_subject("A", 1, 0.0, 180.0, 180.0, 360.0)], hp)
        assert any("z=0" in message for message in cohort.warnings)
        assert "z=0" in jm_caplog.text


class TestInitLatent:
    def test_membership(self, make_subject, hp):
        cohort = validate_cohort([make_subject("A", 1, 0.0, 10.0, 5.0, 20.0, times=[10.0, 20.0], ys=[1.0, 2.0])], hp)
        latent = init_latent(cohort, np.random.default_rng(0))
        h, v = latent.h[0], latent.v[0]
        assert 0.0 < h <= 10.0
        assert 5.0 < v <= 20.0
        assert latent.w[0] > 0.0

    def test_right_censored_gets_finite_v(self, make_subject, hp):
        cohort = validate_cohort([make_subject("A", 0, 0.0, 50.0, 100.0, math.inf, times=[50.0], ys=[1.0])], hp)
        latent = init_latent(cohort, np.random.default_rng(1))
        assert 100.0 < latent.v[0] < math.inf

    def test_deterministic(self, toy_cohort):
        first = init_latent(toy_cohort, np.random.default_rng(5))
        second = init_latent(toy_cohort, np.random.default_rng(5))
        np.testing.assert_array_equal(first.h, second.h)
        np.testing.assert_array_equal(first.w, second.w)

    def test_toy_cohort_in_support(self, toy_cohort):
        latent = init_latent(toy_cohort, np.random.default_rng(6))
        assert support_violations(latent, toy_cohort).size == 0
        for i in range(toy_cohort.size):
            lo, hi = h_bounds(toy_cohort, i, float(latent.v[i]))
            assert lo < latent.h[i] <= hi
            lo, hi = w_bounds(toy_cohort, i, float(latent.h[i]))
            assert lo < latent.w[i] <= hi

    def test_infeasible_pair(self, make_subject, hp):
        cohort = validate_cohort([make_subject("A", 1, 50.0, 60.0, 10.0, 40.0, times=[60.0], ys=[1.0])], hp)
        with pytest.raises(JointModelError, match="infeasible"):
            init_latent(cohort, np.random.default_rng(0))


class TestSupport:
    def test_violation_detected(self, toy_cohort):
        latent = init_latent(toy_cohort, np.random.default_rng(7))
        broken = LatentState(h=latent.h.copy(), w=latent.w.copy())
        broken.h[2] = toy_cohort.r_h[2] + 1.0
        assert support_violations(broken, toy_cohort).tolist() == [2]
        with pytest.raises(SupportViolationError, match="R3"):
            assert_support(broken, toy_cohort)
