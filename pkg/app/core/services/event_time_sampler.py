from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from app.core.config import get_logger
from app.core.errors import EmptyUrnError, InsufficientValuesError, JointModelError
from app.core.models.cohort_models import BaseMeasureParams, LatentState, ValidatedCohort
from app.core.models.theta_models import ThetaState
from app.core.services.cohort_service import assert_support, h_bounds, w_bounds, w_in_bounds
from app.core.services.kernels import (
    jeffreys_normal_update,
    log_gauss_legendre,
    log_interval_mass,
    normal_logpdf,
    sample_truncated_normal,
)
from app.core.services.outcome_sampler import OutcomeSampler

logger = get_logger()

LogLikelihood = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, slots=True)
class UrnWeights:
    """Normalized Polya-urn probabilities: ``r0`` for a fresh base-measure draw, ``weights`` for ``donors``."""

    r0: float
    donors: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_log(cls, log_r0: float, donors: np.ndarray, log_weights: np.ndarray) -> UrnWeights:
        stacked = np.concatenate(([log_r0], log_weights))
        top = float(np.max(stacked)) if stacked.size else -math.inf
        if not math.isfinite(top):
            raise EmptyUrnError("empty urn: every urn weight is zero.")
        probabilities = np.exp(stacked - special.logsumexp(stacked))
        probabilities /= probabilities.sum()
        return cls(r0=float(probabilities[0]), donors=np.asarray(donors, dtype=int), weights=probabilities[1:])

    @property
    def probabilities(self) -> np.ndarray:
        return np.concatenate(([self.r0], self.weights))

    def choose(self, rng: np.random.Generator) -> int:
        """Index of the chosen donor subject, or -1 for a fresh draw."""
        pick = int(rng.choice(self.probabilities.size, p=self.probabilities))
        return -1 if pick == 0 else int(self.donors[pick - 1])


def _eligible(values: np.ndarray, cohort: ValidatedCohort, i: int, lo: float, hi: float) -> np.ndarray:
    mask = (cohort.z == cohort.z[i]) & (values > lo) & (values <= hi)
    mask[i] = False
    return np.flatnonzero(mask)


def h_urn_weights(
    i: int,
    latent: LatentState,
    cohort: ValidatedCohort,
    lambda_h: BaseMeasureParams,
    alpha_h: float,
) -> UrnWeights:
    z = int(cohort.z[i])
    lo, hi = h_bounds(cohort, i, float(latent.h[i] + latent.w[i]))
    log_r0 = math.log(alpha_h) + log_interval_mass(lo, hi, lambda_h.mu[z], lambda_h.tau[z])
    donors = _eligible(latent.h, cohort, i, lo, hi)
    return UrnWeights.from_log(log_r0, donors, np.zeros(donors.size))


def sample_h(
    i: int,
    latent: LatentState,
    cohort: ValidatedCohort,
    lambda_h: BaseMeasureParams,
    alpha_h: float,
    rng: np.random.Generator,
) -> float:
    urn = h_urn_weights(i, latent, cohort, lambda_h, alpha_h)
    donor = urn.choose(rng)
    if donor >= 0:
        return float(latent.h[donor])
    z = int(cohort.z[i])
    lo, hi = h_bounds(cohort, i, float(latent.h[i] + latent.w[i]))
    return sample_truncated_normal(lambda_h.mu[z], lambda_h.tau[z], lo, hi, rng)


def _subject_likelihood(
    i: int,
    h: float,
    outcome: OutcomeSampler | None,
    theta: ThetaState | None,
) -> LogLikelihood | None:
    if outcome is None or theta is None or not outcome.depends_on_w(i):
        return None
    return lambda w: outcome.loglik_subject(i, w, h, theta)


def _log_new_draw_mass(
    lo: float,
    hi: float,
    mu: float,
    tau: float,
    loglik: LogLikelihood | None,
    n_nodes: int,
) -> float:
    """log of the integral of p3(w) g0(w) over (lo, hi]."""
    if loglik is None:
        return log_interval_mass(lo, hi, mu, tau)

    def integrand(points: np.ndarray) -> np.ndarray:
        return np.asarray(loglik(points)) + normal_logpdf(points, mu, tau)

    # only responders carry a likelihood in w and their interval is bounded
    return log_gauss_legendre(integrand, lo, hi, n_nodes)


def w_urn_weights(
    i: int,
    latent: LatentState,
    cohort: ValidatedCohort,
    lambda_w: BaseMeasureParams,
    alpha_w: float,
    outcome: OutcomeSampler | None = None,
    theta: ThetaState | None = None,
    n_nodes: int = 20,
) -> UrnWeights:
    """Urn for w_i given h_i; donors are weighted by the outcome likelihood at their w."""
    z = int(cohort.z[i])
    h = float(latent.h[i])
    lo, hi = w_bounds(cohort, i, h)
    loglik = _subject_likelihood(i, h, outcome, theta)
    donors = _eligible(latent.w, cohort, i, lo, hi)

    log_r0 = math.log(alpha_w) + _log_new_draw_mass(lo, hi, lambda_w.mu[z], lambda_w.tau[z], loglik, n_nodes)
    if loglik is None or donors.size == 0:
        log_weights = np.zeros(donors.size)
    else:
        log_weights = np.asarray(loglik(latent.w[donors]), dtype=float)
    return UrnWeights.from_log(log_r0, donors, log_weights)


def independence_metropolis(
    start: float,
    lo: float,
    hi: float,
    mu: float,
    tau: float,
    loglik: LogLikelihood | None,
    n_steps: int,
    rng: np.random.Generator,
) -> tuple[float, int]:
    """Chain targeting p3(w) g0(w) on (lo, hi] with the truncated base measure as proposal.

    Returns the final state and the number of accepted proposals.
    """
    if loglik is None:
        return sample_truncated_normal(mu, tau, lo, hi, rng), n_steps

    current = start if lo < start <= hi else sample_truncated_normal(mu, tau, lo, hi, rng)
    current_ll = float(np.asarray(loglik(np.array([current])))[0])
    accepted = 0
    for _ in range(n_steps):
        proposal = sample_truncated_normal(mu, tau, lo, hi, rng)
        proposal_ll = float(np.asarray(loglik(np.array([proposal])))[0])
        if rng.random() < math.exp(min(0.0, proposal_ll - current_ll)):
            current, current_ll = proposal, proposal_ll
            accepted += 1
    return current, accepted


@dataclass(slots=True)
class WDraw:
    value: float
    fresh: bool
    accepted: int = 0


def sample_w(
    i: int,
    latent: LatentState,
    cohort: ValidatedCohort,
    lambda_w: BaseMeasureParams,
    alpha_w: float,
    rng: np.random.Generator,
    outcome: OutcomeSampler | None = None,
    theta: ThetaState | None = None,
    n_nodes: int = 20,
    metropolis_steps: int = 10,
) -> WDraw:
    urn = w_urn_weights(i, latent, cohort, lambda_w, alpha_w, outcome, theta, n_nodes)
    donor = urn.choose(rng)
    if donor >= 0:
        return WDraw(value=float(latent.w[donor]), fresh=False)

    z = int(cohort.z[i])
    h = float(latent.h[i])
    lo, hi = w_bounds(cohort, i, h)
    value, accepted = independence_metropolis(
        float(latent.w[i]),
        lo,
        hi,
        lambda_w.mu[z],
        lambda_w.tau[z],
        _subject_likelihood(i, h, outcome, theta),
        metropolis_steps,
        rng,
    )
    return WDraw(value=value, fresh=True, accepted=accepted)


def _update_cell(
    params: BaseMeasureParams,
    values: np.ndarray,
    z: int,
    label: str,
    rng: np.random.Generator,
) -> BaseMeasureParams:
    distinct = np.unique(values)
    try:
        mu, tau = jeffreys_normal_update(distinct, rng)
    except InsufficientValuesError:
        logger.warning("Keeping %s base measure for z=%d: %d distinct value(s).", label, z, distinct.size)
        return params
    return params.with_group(z, mu, tau)


def update_base_measures(
    latent: LatentState,
    cohort: ValidatedCohort,
    lambda_h: BaseMeasureParams,
    lambda_w: BaseMeasureParams,
    rng: np.random.Generator,
) -> tuple[BaseMeasureParams, BaseMeasureParams]:
    """Jeffreys updates from the distinct imputed values of each (variable, group) cell."""
    for z in (1, 0):
        lambda_h = _update_cell(lambda_h, latent.h[cohort.z == z], z, "H", rng)
    for z in (1, 0):
        lambda_w = _update_cell(lambda_w, latent.w[cohort.z == z], z, "W", rng)
    return lambda_h, lambda_w


@dataclass(slots=True)
class SweepStats:
    fresh_w: int = 0
    proposals: int = 0
    accepted: int = 0
    repairs: int = 0
    clusters: dict[str, int] = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else math.nan


class EventTimeSampler:
    """Sequential H then W sweeps over the cohort for one chain."""

    def __init__(
        self,
        cohort: ValidatedCohort,
        alpha_h: float,
        alpha_w: float,
        outcome: OutcomeSampler | None = None,
        metropolis_steps: int = 10,
        quadrature_nodes: int = 20,
    ) -> None:
        self.cohort = cohort
        self.alpha_h = alpha_h
        self.alpha_w = alpha_w
        self.outcome = outcome
        self.metropolis_steps = metropolis_steps
        self.quadrature_nodes = quadrature_nodes

    def _draw_w(
        self,
        i: int,
        latent: LatentState,
        theta: ThetaState | None,
        lambda_w: BaseMeasureParams,
        rng: np.random.Generator,
        stats: SweepStats,
    ) -> None:
        draw = sample_w(
            i,
            latent,
            self.cohort,
            lambda_w,
            self.alpha_w,
            rng,
            outcome=self.outcome,
            theta=theta,
            n_nodes=self.quadrature_nodes,
            metropolis_steps=self.metropolis_steps,
        )
        latent.w[i] = draw.value
        if draw.fresh:
            stats.fresh_w += 1
            stats.proposals += self.metropolis_steps
            stats.accepted += draw.accepted
        if self.outcome is not None:
            self.outcome.refresh(i, latent)

    def sweep(
        self,
        latent: LatentState,
        theta: ThetaState | None,
        lambda_h: BaseMeasureParams,
        lambda_w: BaseMeasureParams,
        rng: np.random.Generator,
    ) -> SweepStats:
        """Every h_i, then every w_i; failing subjects are tagged on the raised error."""
        cohort = self.cohort
        stats = SweepStats()
        i = -1
        try:
            for i in range(cohort.size):
                latent.h[i] = sample_h(i, latent, cohort, lambda_h, self.alpha_h, rng)
                if w_in_bounds(cohort, i, float(latent.h[i]), float(latent.w[i])):
                    if self.outcome is not None:
                        self.outcome.refresh(i, latent)
                else:
                    stats.repairs += 1
                    self._draw_w(i, latent, theta, lambda_w, rng, stats)

            for i in range(cohort.size):
                self._draw_w(i, latent, theta, lambda_w, rng, stats)
        except (JointModelError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            exc.subject_id = cohort.ids[i] if i >= 0 else None
            raise

        assert_support(latent, cohort)
        stats.clusters = {
            "h": int(np.unique(latent.h).size),
            "w": int(np.unique(latent.w).size),
        }
        return stats
