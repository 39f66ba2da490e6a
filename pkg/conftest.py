from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np
import pytest

from app.core.config import LOGGER_NAME
from app.core.models.chain_models import ChainConfig, FitConfig, ModelVariant, SplineConfig
from app.core.models.cohort_models import Hyperparams, Subject, ValidatedCohort
from app.core.models.draws_models import CohortSnapshot, PosteriorDraws
from app.core.models.generator_models import GeneratorConfig
from app.core.services.chain_engine import hyperparams_for, run_chains
from app.core.services.cohort_service import validate_cohort
from app.core.services.generator import GeneratedCohort, generate_cohort
from app.core.services.splines import BasisSpec, SplineBases, eval_basis
from app.core.services.summaries import CurveSummary

VISITS = (0.0, 180.0, 360.0, 540.0, 720.0, 900.0)


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="Run long sampler checks.")


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "slow: long-running statistical or sampler check")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def build_subject(
    subject_id: str,
    z: int,
    l_h: float,
    r_h: float,
    l_v: float,
    r_v: float,
    times: Sequence[float] | None = None,
    ys: Sequence[float] | None = None,
    x: Sequence[float] = (0.0,),
) -> Subject:
    if times is None:
        times = [t for t in VISITS if t >= r_h] or [r_h]
    if ys is None:
        ys = [20.0 + 0.001 * t for t in times]
    return Subject(
        id=subject_id,
        z=z,
        x_star=tuple(float(value) for value in x),
        l_h=l_h,
        r_h=r_h,
        l_v=l_v,
        r_v=r_v,
        obs_t=tuple(float(t) for t in times),
        obs_y=tuple(float(y) for y in ys),
    )


def toy_subject_list() -> list[Subject]:
    """Two subjects in every (responder, z) cell, four to five visits each."""
    rng = np.random.default_rng(2024)
    layout = [
        ("R1", 1, 0.0, 180.0, 180.0, 360.0, 1.0),
        ("R2", 1, 0.0, 180.0, 360.0, 540.0, 2.5),
        ("R3", 0, 180.0, 360.0, 360.0, 540.0, 1.5),
        ("R4", 0, 0.0, 180.0, 180.0, 360.0, 3.0),
        ("N1", 1, 0.0, 180.0, 720.0, math.inf, 2.0),
        ("N2", 1, 180.0, 360.0, 900.0, math.inf, 0.5),
        ("N3", 0, 0.0, 180.0, 720.0, math.inf, 1.2),
        ("N4", 0, 0.0, 180.0, 540.0, math.inf, 2.2),
    ]
    subjects = []
    for subject_id, z, l_h, r_h, l_v, r_v, x in layout:
        times = [t for t in VISITS if t >= r_h]
        ys = [4.0 + 0.3 * x + 0.5 * t / 365.25 + 0.1 * rng.standard_normal() for t in times]
        subjects.append(build_subject(subject_id, z, l_h, r_h, l_v, r_v, times, ys, (x,)))
    return subjects


@pytest.fixture
def make_subject() -> Callable[..., Subject]:
    return build_subject


@pytest.fixture
def hp() -> Hyperparams:
    return Hyperparams()


@pytest.fixture
def toy_subjects() -> list[Subject]:
    return toy_subject_list()


@pytest.fixture
def toy_cohort(toy_subjects: list[Subject], hp: Hyperparams) -> ValidatedCohort:
    return validate_cohort(toy_subjects, hp, ("x",))


@pytest.fixture
def small_splines() -> SplineConfig:
    return SplineConfig(n_quantile_knots_b=2, n_quantile_knots_a=2)


@pytest.fixture
def toy_config(small_splines: SplineConfig) -> FitConfig:
    return FitConfig(
        chain=ChainConfig(n_iter=50, burn_in=20, n_chains=1, seed=11, log_every=1000),
        splines=small_splines,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def jm_caplog(caplog: pytest.LogCaptureFixture):
    """caplog wired to the package logger, which does not propagate to root."""
    logger = logging.getLogger(LOGGER_NAME)
    logger.addHandler(caplog.handler)
    caplog.set_level(logging.DEBUG, logger=LOGGER_NAME)
    yield caplog
    logger.removeHandler(caplog.handler)


def simple_bases(n_subjects: int, responder: np.ndarray, degree: int = 2) -> SplineBases:
    return SplineBases(
        population_responder=BasisSpec(degree, (0.0,)),
        population_nonresponder=BasisSpec(degree, (1.0,)),
        individual_responder=BasisSpec(degree, (0.0,)),
        individual_nonresponder=tuple(None if responder[i] else BasisSpec(degree, (1.0,)) for i in range(n_subjects)),
        time_scale=365.25,
        realigned_range=(-365.25, 730.5),
        calendar_range=(0.0, 730.5),
    )


def build_draws(
    w: np.ndarray,
    z: Sequence[int],
    responder: Sequence[bool] | None = None,
    h: np.ndarray | None = None,
    theta: dict[str, np.ndarray] | None = None,
    x_star: np.ndarray | None = None,
    T: float = 2190.0,
    seed: int = 7,
) -> PosteriorDraws:
    """Hand-made draws shaped (chains, draws, subjects) on a quadratic basis with one knot."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 2:
        w = w[None]
    n_chains, n_draws, n = w.shape
    z = np.asarray(z, dtype=int)
    responder = np.ones(n, dtype=bool) if responder is None else np.asarray(responder, dtype=bool)
    h = np.full_like(w, 10.0) if h is None else np.broadcast_to(np.asarray(h, dtype=float), w.shape).copy()
    x_star = np.zeros((n, 1)) if x_star is None else np.asarray(x_star, dtype=float).reshape(n, -1)

    columns: dict[str, np.ndarray] = {
        "h": h,
        "w": w,
        "lambda_h": np.ones((n_chains, n_draws, 4)),
        "lambda_w": np.ones((n_chains, n_draws, 4)),
        "accept_w": np.ones((n_chains, n_draws)),
    }
    if theta is not None:
        columns.update({name: np.asarray(values, dtype=float) for name, values in theta.items()})
    snapshot = CohortSnapshot(
        ids=tuple(f"S{i:02d}" for i in range(n)),
        covariate_names=tuple(f"x{k}" for k in range(x_star.shape[1])),
        z=z,
        responder=responder,
        x_star=x_star,
        t=tuple(np.array([100.0, 200.0, 300.0]) for _ in range(n)),
        y=tuple(np.array([4.0, 4.5, 5.0]) for _ in range(n)),
        T=T,
    )
    return PosteriorDraws(
        columns=columns,
        variant=ModelVariant.JOINT if theta is not None else ModelVariant.MARGINAL,
        bases=simple_bases(n, responder),
        cohort=snapshot,
        seed=seed,
    )


def theta_columns(
    n_chains: int,
    n_draws: int,
    n: int,
    beta1: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
    beta2: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
    alpha1: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
    alpha2: Sequence[float] = (0.0, 0.0, 0.0, 0.0),
    beta_star: Sequence[float] = (0.0,),
    sigma2: float = 1.0,
) -> dict[str, np.ndarray]:
    """Constant outcome-model draws for the basis of ``simple_bases``."""

    def tile(values: Sequence[float]) -> np.ndarray:
        return np.tile(np.asarray(values, dtype=float), (n_chains, n_draws, 1))

    return {
        "beta_star": tile(beta_star),
        "beta1": tile(beta1),
        "beta2": tile(beta2),
        "alpha1": tile(alpha1),
        "alpha2": tile(alpha2),
        "b": np.zeros((n_chains, n_draws, n, 4)),
        "a": np.zeros((n_chains, n_draws, n, 4)),
        "sigma2": np.full((n_chains, n_draws), sigma2),
        "smoothing": np.ones((n_chains, n_draws, 6)),
        "s2_b_poly": np.ones((n_chains, n_draws, 3)),
        "s2_a_poly": np.ones((n_chains, n_draws, 3)),
        "loglik": np.zeros((n_chains, n_draws, n)),
    }


@pytest.fixture
def make_draws() -> Callable[..., PosteriorDraws]:
    return build_draws


@pytest.fixture
def make_theta() -> Callable[..., dict[str, np.ndarray]]:
    return theta_columns


def dense_generator_config(**updates) -> GeneratorConfig:
    """Monthly visits, no dropout and W medians far apart; every subject is a responder."""
    settings = {
        "n_per_group": (15, 15),
        "visit_interval_mean": 30.0,
        "visit_jitter": 5.0,
        "n_visits": 40,
        "T": 1200.0,
        "dropout_prob": 0.0,
        "h_mean": (60.0, 60.0),
        "h_var": (20.0**2, 20.0**2),
        "w_mean": (300.0, 120.0),
        "w_var": (60.0**2, 40.0**2),
    }
    settings.update(updates)
    return GeneratorConfig(**settings)


def fit_config(
    n_iter: int,
    burn_in: int,
    seed: int,
    splines: SplineConfig | None = None,
    n_chains: int = 1,
    **chain,
) -> FitConfig:
    return FitConfig(
        chain=ChainConfig(n_iter=n_iter, burn_in=burn_in, n_chains=n_chains, seed=seed, log_every=10_000, **chain),
        splines=splines or SplineConfig(),
    )


def fit_generated(generated: GeneratedCohort, config: FitConfig) -> PosteriorDraws:
    T = generated.cohort.sidecar.T
    cohort = validate_cohort(list(generated.cohort.subjects), hyperparams_for(config, T), generated.cohort.covariate_names)
    return run_chains(cohort, config, T=T, threads=1)


def interior_grid(draws: PosteriorDraws, n_grid: int = 41, trim: float = 0.1) -> np.ndarray:
    lo, hi = draws.bases.realigned_range
    return np.linspace(lo + trim * (hi - lo), hi - trim * (hi - lo), n_grid)


def true_responder_curve(config: GeneratorConfig, group: int, grid: np.ndarray, reference: np.ndarray) -> np.ndarray:
    curve = config.responder_curves[group]
    rows = eval_basis(BasisSpec(config.degree, curve.knots), np.asarray(grid) / config.time_scale).reshape(len(grid), -1)
    return rows @ np.asarray(curve.coefficients) + float(np.dot(reference, config.beta_star))


def band_coverage(summary: CurveSummary, truth: np.ndarray) -> float:
    band = summary.level
    return float(np.mean((band.lower <= truth) & (truth <= band.upper)))


def true_proportion(generated: GeneratedCohort, group: int, threshold: float) -> float:
    """Share of a group's subjects with v <= T whose true w is at most ``threshold``."""
    T = generated.cohort.sidecar.T
    suppressed = [truth for truth in generated.truth.subjects if truth.z == group and truth.v <= T]
    return float(np.mean([truth.w <= threshold for truth in suppressed])) if suppressed else math.nan


@pytest.fixture(scope="session")
def dense_fit() -> tuple[GeneratedCohort, PosteriorDraws]:
    generated = generate_cohort(dense_generator_config(), seed=42)
    small = SplineConfig(n_quantile_knots_b=2, n_quantile_knots_a=2)
    return generated, fit_generated(generated, fit_config(150, 50, seed=42, splines=small))
