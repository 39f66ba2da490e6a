import math

import numpy as np
import pytest
from scipy import stats

from app.core.errors import SingularPrecisionError
from app.core.models.cohort_models import LatentState
from app.core.services.cohort_service import validate_cohort
from app.core.services.outcome_sampler import FIXED_BLOCKS, DesignCache, OutcomeSampler, spline_block
from app.core.services.splines import BasisSpec, eval_basis
from conftest import VISITS, simple_bases

TRUTH = {
    "beta_star": np.array([0.7]),
    "beta1": np.array([5.0, 1.0, -0.5, 0.0]),
    "beta2": np.array([4.0, 0.5, 0.2, 0.0]),
    "alpha1": np.array([3.0, -0.2, 0.1, 0.0]),
    "alpha2": np.array([6.0, 0.3, -0.1, 0.0]),
}
LAYOUT = [
    ("R1", 1, True, 0.5),
    ("R2", 1, True, 1.5),
    ("R3", 0, True, 1.0),
    ("R4", 0, True, 2.0),
    ("N1", 1, False, 0.8),
    ("N2", 1, False, 1.7),
    ("N3", 0, False, 1.2),
    ("N4", 0, False, 2.4),
]
V_TRUE = 300.0


def _block_cohort(make_subject, hp, truth=TRUTH, noise=0.0, seed=0):
    """Two subjects per (responder, z) block with outcomes placed on the population curves."""
    rng = np.random.default_rng(seed)
    times = np.array(VISITS)
    subjects = []
    for subject_id, z, responder, x in LAYOUT:
        if responder:
            spec, scaled = BasisSpec(2, (0.0,)), (times - V_TRUE) / 365.25
        else:
            spec, scaled = BasisSpec(2, (1.0,)), times / 365.25
        curve = eval_basis(spec, scaled) @ truth[spline_block(responder, z)]
        y = x * truth["beta_star"][0] + curve + noise * rng.standard_normal(times.size)
        r_v = 400.0 if responder else math.inf
        l_v = 200.0 if responder else 900.0
        subjects.append(make_subject(subject_id, z, 0.0, 100.0, l_v, r_v, times=times, ys=y, x=(x,)))

    cohort = validate_cohort(subjects, hp)
    latent = LatentState(
        h=np.full(cohort.size, 50.0),
        w=np.where(cohort.responder, V_TRUE - 50.0, 1000.0),
    )
    outcome = OutcomeSampler(cohort, simple_bases(cohort.size, cohort.responder))
    outcome.refresh_all(latent)
    return cohort, latent, outcome


def _single_observation(make_subject, hp, y):
    cohort = validate_cohort([make_subject("S", 1, 0.0, 100.0, 200.0, 400.0, times=[300.0], ys=[y], x=(1.0,))], hp)
    latent = LatentState(h=np.array([50.0]), w=np.array([250.0]))
    outcome = OutcomeSampler(cohort, simple_bases(1, cohort.responder))
    outcome.refresh_all(latent)
    return cohort, latent, outcome


def _analytic_posterior(outcome, cohort, theta):
    layout = outcome.layout
    rows, targets = [], []
    for i in range(cohort.size):
        design = outcome.designs[i]
        for j in range(design.fixed_rows.shape[0]):
            row = np.zeros(layout.size)
            row[layout.slices["beta_star"]] = cohort.x_star[i]
            row[layout.slices[design.block]] = design.fixed_rows[j]
            rows.append(row)
        targets.append(cohort.y[i])
    X, y = np.array(rows), np.concatenate(targets)
    prior = np.zeros(layout.size)
    for name in FIXED_BLOCKS[1:]:
        block = prior[layout.slices[name]]
        block[layout.penalized[name]] = 1.0 / getattr(theta, f"s2_{name}")
    precision = X.T @ X / theta.sigma2 + np.diag(prior)
    covariance = np.linalg.inv(precision)
    return covariance @ (X.T @ y / theta.sigma2), covariance


class TestLoglik:
    def test_single_observation_reference(self, make_subject, hp):
        _, _, outcome = _single_observation(make_subject, hp, 0.0)
        theta = outcome.initial_theta()
        for w in (160.0, 250.0, 340.0):
            assert outcome.loglik_subject(0, w, 50.0, theta) == pytest.approx(-0.5 * math.log(2.0 * math.pi))

    def test_vectorised_over_w(self, make_subject, hp):
        _, _, outcome = _block_cohort(make_subject, hp)
        theta = outcome.initial_theta()
        grid = np.array([160.0, 250.0, 340.0])
        values = outcome.loglik_subject(0, grid, 50.0, theta)
        assert values.shape == (3,)
        assert values[1] == pytest.approx(outcome.loglik_subject(0, 250.0, 50.0, theta))

    def test_peaks_at_generating_w(self, make_subject, hp):
        _, _, outcome = _block_cohort(make_subject, hp)
        theta = outcome.initial_theta()
        for name, values in TRUTH.items():
            setattr(theta, name, values.copy())
        theta.sigma2 = 0.01
        grid = np.arange(151.0, 351.0)
        values = outcome.loglik_subject(0, grid, 50.0, theta)
        assert abs(grid[np.argmax(values)] - (V_TRUE - 50.0)) <= 1.0

    def test_matches_cached_mean(self, make_subject, hp):
        cohort, latent, outcome = _block_cohort(make_subject, hp, noise=0.3)
        theta = outcome.initial_theta()
        theta.beta1 = TRUTH["beta1"].copy()
        theta.b[0] = [0.1, -0.2, 0.05, 0.3]
        residual = cohort.y[0] - outcome.subject_mean(0, theta)
        expected = stats.norm.logpdf(residual, scale=math.sqrt(theta.sigma2)).sum()
        assert outcome.loglik_subject(0, latent.w[0], latent.h[0], theta) == pytest.approx(expected, rel=1e-12)

    def test_flattens_as_variance_grows(self, make_subject, hp):
        _, _, outcome = _block_cohort(make_subject, hp)
        theta = outcome.initial_theta()
        theta.beta1 = TRUTH["beta1"].copy()
        gaps = []
        for sigma2 in (1.0, 10.0, 100.0):
            theta.sigma2 = sigma2
            near, far = outcome.loglik_subject(0, np.array([250.0, 320.0]), 50.0, theta)
            gaps.append(abs(near - far))
        assert gaps[0] > gaps[1] > gaps[2] > 0.0

    def test_nonresponder_is_flat_in_w(self, make_subject, hp):
        _, _, outcome = _block_cohort(make_subject, hp)
        values = outcome.loglik_subject(4, np.array([900.0, 1500.0, 4000.0]), 50.0, outcome.initial_theta())
        assert np.ptp(values) == 0.0
        assert not outcome.depends_on_w(4)


class TestFixedEffects:
    def test_recovers_noise_free_truth(self, make_subject, hp, rng):
        _, _, outcome = _block_cohort(make_subject, hp)
        theta = outcome.initial_theta()
        theta.sigma2 = 1e-14
        for name in FIXED_BLOCKS[1:]:
            setattr(theta, f"s2_{name}", 1e-6)
        outcome.update_fixed_effects(theta, rng)
        for name, values in TRUTH.items():
            np.testing.assert_allclose(getattr(theta, name), values, atol=1e-3)

    def test_tiny_smoothing_variance_kills_knot_terms(self, make_subject, hp, rng):
        truth = {name: values.copy() for name, values in TRUTH.items()}
        for name in FIXED_BLOCKS[1:]:
            truth[name][3] = 2.0
        _, _, outcome = _block_cohort(make_subject, hp, truth=truth, noise=0.5, seed=1)
        theta = outcome.initial_theta()
        theta.sigma2 = 0.25
        for name in FIXED_BLOCKS[1:]:
            setattr(theta, f"s2_{name}", 1e-12)
        outcome.update_fixed_effects(theta, rng)
        for name in FIXED_BLOCKS[1:]:
            assert abs(getattr(theta, name)[3]) < 1e-4

    def test_draws_follow_gaussian_posterior(self, make_subject, hp, rng):
        cohort, _, outcome = _block_cohort(make_subject, hp, noise=0.5, seed=2)
        theta = outcome.initial_theta()
        theta.sigma2 = 0.25
        for name in FIXED_BLOCKS[1:]:
            setattr(theta, f"s2_{name}", 2.0)
        mean, covariance = _analytic_posterior(outcome, cohort, theta)

        draws = np.empty((10_000, outcome.layout.size))
        for k in range(draws.shape[0]):
            outcome.update_fixed_effects(theta, rng)
            draws[k] = np.concatenate([getattr(theta, name) for name in FIXED_BLOCKS])

        slices = outcome.layout.slices
        for cell in (slices["beta_star"].start, slices["beta1"].start + 3, slices["alpha2"].start):
            standardized = (draws[:, cell] - mean[cell]) / math.sqrt(covariance[cell, cell])
            assert stats.kstest(standardized, "norm").statistic < 0.025

    def test_block_activity(self, make_subject, hp, jm_caplog):
        _, _, outcome = _single_observation(make_subject, hp, 1.0)
        assert not outcome.is_active("beta1")
        assert not outcome.is_active("alpha2")
        assert outcome.is_active("beta_star")
        assert "Holding spline block beta1 at zero" in jm_caplog.text

    def test_singular_block_is_named(self, make_subject, hp, rng):
        _, _, outcome = _single_observation(make_subject, hp, 1.0)
        with pytest.raises(SingularPrecisionError, match="beta_star") as info:
            outcome.update_fixed_effects(outcome.initial_theta(), rng)
        assert info.value.block == "beta_star"

    def test_sparse_block_is_held_at_zero(self, make_subject, hp, rng, jm_caplog):
        dense = [subject for subject in _block_cohort(make_subject, hp)[0].subjects if subject.id not in {"N3", "N4"}]
        sparse = make_subject("N5", 0, 0.0, 180.0, 360.0, math.inf, times=[180.0, 360.0], ys=[9.0, 9.5], x=(1.0,))
        cohort = validate_cohort([*dense, sparse], hp)
        latent = LatentState(h=np.full(cohort.size, 50.0), w=np.where(cohort.responder, V_TRUE - 50.0, 1000.0))
        outcome = OutcomeSampler(cohort, simple_bases(cohort.size, cohort.responder))
        outcome.refresh_all(latent)
        assert not outcome.is_active("alpha2")
        assert outcome.is_active("alpha1")

        theta = outcome.initial_theta()
        outcome.update_fixed_effects(theta, rng)
        assert np.all(theta.alpha2 == 0.0)
        assert np.all(np.isfinite(theta.beta_star))
        outcome.update(theta, latent, rng)
        assert np.all(theta.variances() > 0.0)
        assert "Holding spline block alpha2 at zero: 1 subject(s) give 2 distinct time(s), need 3." in jm_caplog.text


class TestRandomEffects:
    def test_tight_prior_pins_to_zero(self, make_subject, hp, rng):
        _, _, outcome = _block_cohort(make_subject, hp, noise=0.5)
        theta = outcome.initial_theta()
        theta.s2_b = 1e-12
        theta.s2_b_poly = np.full(3, 1e-12)
        outcome.update_random_effects(0, theta, rng)
        assert np.max(np.abs(theta.b[0])) < 1e-4

    @pytest.mark.parametrize("subject", [0, 4])
    def test_vague_prior_is_least_squares(self, make_subject, hp, rng, subject):
        cohort, _, outcome = _block_cohort(make_subject, hp, noise=0.5, seed=3)
        theta = outcome.initial_theta()
        theta.sigma2 = 1e-14
        theta.s2_b = theta.s2_a = 1e12
        theta.s2_b_poly = np.full(3, 1e12)
        theta.s2_a_poly = np.full(3, 1e12)
        outcome.update_random_effects(subject, theta, rng)

        rows = outcome.designs[subject].individual_rows
        expected, *_ = np.linalg.lstsq(rows, cohort.y[subject], rcond=None)
        drawn = theta.b[subject] if cohort.responder[subject] else theta.a[subject]
        np.testing.assert_allclose(drawn, expected, atol=1e-3)


class TestVariances:
    def test_zero_values_follow_prior_scale(self, make_subject, hp, rng):
        _, _, outcome = _block_cohort(make_subject, hp)
        draws = np.array([outcome._variance_draw(np.zeros(10), rng) for _ in range(20_000)])
        shape = outcome.priors.gamma_shape + 5.0
        assert draws.mean() == pytest.approx(outcome.priors.gamma_rate / (shape - 1.0), rel=0.05)

    def test_empty_values_draw_from_prior(self, make_subject, hp, rng):
        _, _, outcome = _block_cohort(make_subject, hp)
        draws = np.array([outcome._variance_draw(np.empty(0), rng) for _ in range(100)])
        assert np.all(draws > 0.0)
        assert np.all(np.isfinite(draws))

    def test_recovers_residual_variance(self, make_subject, hp, rng):
        _, _, outcome = _block_cohort(make_subject, hp)
        values = np.random.default_rng(4).normal(0.0, 2.0, size=20_000)
        assert 3.6 <= outcome._variance_draw(values, rng) <= 4.4

    def test_update_records_residual_sum(self, make_subject, hp, rng):
        _, _, outcome = _block_cohort(make_subject, hp, noise=0.3)
        theta = outcome.initial_theta()
        theta.beta1 = TRUTH["beta1"].copy()
        theta.b[:] = 0.05
        expected = outcome.residual_sum_of_squares(theta)
        outcome.update_variances(theta, rng)
        assert outcome.last_rss == pytest.approx(expected, rel=1e-12)
        theta.assert_positive()

    def test_full_update_keeps_variances_positive(self, make_subject, hp, rng):
        _, latent, outcome = _block_cohort(make_subject, hp, noise=0.3)
        theta = outcome.initial_theta()
        for _ in range(20):
            outcome.update(theta, latent, rng)
        assert np.all(theta.variances() > 0.0)


class TestDesignCache:
    def test_incremental_refresh_matches_fresh_build(self, make_subject, hp):
        cohort, latent, _ = _block_cohort(make_subject, hp)
        bases = simple_bases(cohort.size, cohort.responder)
        cache = DesignCache(cohort, bases)
        assert cache.refresh_all(latent) == cohort.size

        latent.w[[0, 2]] += [15.0, -20.0]
        assert cache.refresh_all(latent) == 2
        assert cache.refresh(4, 123.0) is False

        fresh = DesignCache(cohort, bases)
        fresh.refresh_all(latent)
        for i in range(cohort.size):
            np.testing.assert_array_equal(cache[i].fixed_rows, fresh[i].fixed_rows)
            np.testing.assert_array_equal(cache[i].individual_rows, fresh[i].individual_rows)

    def test_missing_rows(self, make_subject, hp):
        cohort, _, _ = _block_cohort(make_subject, hp)
        cache = DesignCache(cohort, simple_bases(cohort.size, cohort.responder))
        with pytest.raises(KeyError):
            cache[0]
