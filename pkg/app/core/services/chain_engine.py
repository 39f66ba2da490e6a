from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.core.config import default_seed, get_logger, show_progress
from app.core.errors import JointModelError, SamplerAbort
from app.core.models.chain_models import FitConfig, ModelVariant
from app.core.models.cohort_models import BaseMeasureParams, Hyperparams, LatentState, ValidatedCohort
from app.core.models.draws_models import CohortSnapshot, PosteriorDraws
from app.core.models.theta_models import ThetaState
from app.core.services.cohort_service import init_latent
from app.core.services.event_time_sampler import EventTimeSampler, SweepStats, update_base_measures
from app.core.services.outcome_sampler import OutcomeSampler
from app.core.services.splines import SplineBases, build_spline_bases

logger = get_logger()

FALLBACK_VARIANCE: float = 180.0**2


def hyperparams_for(config: FitConfig, T: float) -> Hyperparams:
    splines = config.splines
    return Hyperparams(
        alpha_h=config.chain.alpha_h,
        alpha_w=config.chain.alpha_w,
        gamma_shape=config.priors.gamma_shape,
        gamma_rate=config.priors.gamma_rate,
        T=T,
        p=splines.degree,
        K_B=splines.n_quantile_knots_b + int(splines.include_zero_b),
        K_A=splines.n_quantile_knots_a,
        K_phi=1,
        K_psi=1,
    )


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_chains)


def _streams(seed: np.random.SeedSequence) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent latent and outcome streams, derived without mutating ``seed``."""
    children = [
        np.random.SeedSequence(entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + (k,)) for k in range(2)
    ]
    return np.random.default_rng(children[0]), np.random.default_rng(children[1])


def _initial_measure(values: np.ndarray, groups: np.ndarray) -> BaseMeasureParams:
    overall_var = float(np.var(values, ddof=1)) if values.size > 1 else 0.0
    fallback_var = overall_var if overall_var > 0 else FALLBACK_VARIANCE
    fallback_mu = float(values.mean())
    means, variances = [fallback_mu, fallback_mu], [fallback_var, fallback_var]
    for z in (0, 1):
        cell = values[groups == z]
        if cell.size:
            means[z] = float(cell.mean())
        if cell.size > 1 and np.var(cell, ddof=1) > 0:
            variances[z] = float(np.var(cell, ddof=1))
    return BaseMeasureParams(mu=(means[0], means[1]), tau=(variances[0], variances[1]))


@dataclass(slots=True)
class ChainState:
    latent: LatentState
    theta: ThetaState | None
    lambda_h: BaseMeasureParams
    lambda_w: BaseMeasureParams


def initial_state(
    cohort: ValidatedCohort,
    outcome: OutcomeSampler | None,
    latent_rng: np.random.Generator,
    theta_rng: np.random.Generator,
) -> ChainState:
    latent = init_latent(cohort, latent_rng)
    theta = None
    if outcome is not None:
        outcome.refresh_all(latent)
        theta = outcome.update(outcome.initial_theta(), latent, theta_rng)
    return ChainState(
        latent=latent,
        theta=theta,
        lambda_h=_initial_measure(latent.h, cohort.z),
        lambda_w=_initial_measure(latent.w, cohort.z),
    )


class DrawRecorder:
    """Preallocated storage for the retained iterations of one chain."""

    def __init__(self, n_retained: int, cohort: ValidatedCohort, outcome: OutcomeSampler | None, theta: ThetaState | None) -> None:
        n = cohort.size
        self.columns: dict[str, np.ndarray] = {
            "h": np.empty((1, n_retained, n)),
            "w": np.empty((1, n_retained, n)),
            "lambda_h": np.empty((1, n_retained, 4)),
            "lambda_w": np.empty((1, n_retained, 4)),
            "accept_w": np.empty((1, n_retained)),
        }
        if theta is not None:
            for name in ("beta_star", "beta1", "beta2", "alpha1", "alpha2", "b", "a", "s2_b_poly", "s2_a_poly"):
                self.columns[name] = np.empty((1, n_retained) + getattr(theta, name).shape)
            self.columns["sigma2"] = np.empty((1, n_retained))
            self.columns["smoothing"] = np.empty((1, n_retained, 6))
            self.columns["loglik"] = np.empty((1, n_retained, n))
        self.outcome = outcome
        self.slot = 0

    def record(self, state: ChainState, stats: SweepStats) -> None:
        slot = self.slot
        self.columns["h"][0, slot] = state.latent.h
        self.columns["w"][0, slot] = state.latent.w
        self.columns["lambda_h"][0, slot] = state.lambda_h.as_vector()
        self.columns["lambda_w"][0, slot] = state.lambda_w.as_vector()
        self.columns["accept_w"][0, slot] = stats.acceptance_rate
        theta = state.theta
        if theta is not None and self.outcome is not None:
            for name in ("beta_star", "beta1", "beta2", "alpha1", "alpha2", "b", "a", "s2_b_poly", "s2_a_poly"):
                self.columns[name][0, slot] = getattr(theta, name)
            self.columns["sigma2"][0, slot] = theta.sigma2
            self.columns["smoothing"][0, slot] = theta.smoothing_vector()
            self.columns["loglik"][0, slot] = self.outcome.subject_logliks(theta)
        self.slot += 1


def dump_latent(path: Path, chain: int, iteration: int, cohort: ValidatedCohort, latent: LatentState) -> None:
    frame = pd.DataFrame(
        {
            "chain": chain,
            "iteration": iteration,
            "id": list(cohort.ids),
            "h": latent.h,
            "w": latent.w,
        }
    )
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, float_format="%.17g")


def _dump_path(config: FitConfig, chain: int) -> Path | None:
    if config.chain.debug_dump is None:
        return None
    target = Path(config.chain.debug_dump)
    path = target.with_name(f"{target.stem}.chain{chain}{target.suffix or '.csv'}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    return path


def run_chain(
    cohort: ValidatedCohort,
    config: FitConfig,
    seed: np.random.SeedSequence | int,
    chain: int = 0,
    T: float = 2190.0,
    bases: SplineBases | None = None,
) -> PosteriorDraws:
    """One Gibbs chain: H sweep, W sweep, outcome block, base measures; keeps iterations after burn-in."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    settings = config.chain
    bases = bases or build_spline_bases(cohort, config.splines)
    joint = settings.model_variant == ModelVariant.JOINT
    outcome = OutcomeSampler(cohort, bases, config.priors) if joint else None
    sampler = EventTimeSampler(
        cohort,
        alpha_h=settings.alpha_h,
        alpha_w=settings.alpha_w,
        outcome=outcome,
        metropolis_steps=settings.metropolis_steps,
        quadrature_nodes=settings.quadrature_nodes,
    )
    latent_rng, theta_rng = _streams(seed)
    dump_path = _dump_path(config, chain)

    iteration = 0
    try:
        state = initial_state(cohort, outcome, latent_rng, theta_rng)
    except (JointModelError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise SamplerAbort(exc, chain, iteration, getattr(exc, "subject_id", None)) from exc

    recorder = DrawRecorder(settings.retained_per_chain, cohort, outcome, state.theta)
    window_start = time.perf_counter()
    window_accepted = window_proposed = 0

    iterations = tqdm(
        range(1, settings.n_iter + 1),
        desc=f"chain {chain}",
        position=chain,
        leave=False,
        disable=not show_progress(),
    )
    for iteration in iterations:
        try:
            stats = sampler.sweep(state.latent, state.theta, state.lambda_h, state.lambda_w, latent_rng)
            if outcome is not None and state.theta is not None:
                outcome.update(state.theta, state.latent, theta_rng)
            state.lambda_h, state.lambda_w = update_base_measures(
                state.latent, cohort, state.lambda_h, state.lambda_w, latent_rng
            )
        except (JointModelError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            raise SamplerAbort(exc, chain, iteration, getattr(exc, "subject_id", None)) from exc

        window_accepted += stats.accepted
        window_proposed += stats.proposals
        if dump_path is not None:
            dump_latent(dump_path, chain, iteration, cohort, state.latent)
        if iteration > settings.burn_in and (iteration - settings.burn_in - 1) % settings.thin == 0:
            recorder.record(state, stats)

        if iteration % settings.log_every == 0:
            elapsed = time.perf_counter() - window_start
            rate = window_accepted / window_proposed if window_proposed else math.nan
            logger.info(
                "chain %d iteration %d/%d: %.1f it/s, W acceptance %.3f, %d H / %d W clusters",
                chain,
                iteration,
                settings.n_iter,
                settings.log_every / elapsed if elapsed > 0 else math.inf,
                rate,
                stats.clusters.get("h", 0),
                stats.clusters.get("w", 0),
            )
            window_start = time.perf_counter()
            window_accepted = window_proposed = 0

    return PosteriorDraws(
        columns=recorder.columns,
        variant=settings.model_variant,
        bases=bases,
        cohort=CohortSnapshot.from_cohort(cohort, T),
        seed=int(seed.entropy),
        config=config.model_dump(mode="json"),
    )


def _chain_job(args: tuple[ValidatedCohort, FitConfig, np.random.SeedSequence, int, float, SplineBases]) -> PosteriorDraws:
    cohort, config, seed, chain, T, bases = args
    return run_chain(cohort, config, seed, chain=chain, T=T, bases=bases)


def run_chains(cohort: ValidatedCohort, config: FitConfig, T: float, threads: int = 1) -> PosteriorDraws:
    """All chains of a fit with seeds split from the master seed; workers run one chain each."""
    seed = config.chain.seed if config.chain.seed is not None else default_seed()
    bases = build_spline_bases(cohort, config.splines)
    seeds = chain_seeds(seed, config.chain.n_chains)
    jobs = [(cohort, config, seeds[c], c, T, bases) for c in range(config.chain.n_chains)]

    logger.info(
        "Running %d chain(s) of %d iterations (burn-in %d, thin %d) on %d subjects, variant %s.",
        config.chain.n_chains,
        config.chain.n_iter,
        config.chain.burn_in,
        config.chain.thin,
        cohort.size,
        config.chain.model_variant.value,
    )
    workers = min(max(1, threads), len(jobs))
    if workers == 1:
        parts = [_chain_job(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chain_job, jobs))

    draws = PosteriorDraws.concatenate(parts)
    draws.seed = int(seed)
    return draws
