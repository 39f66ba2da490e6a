from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from app.core.config import get_logger
from app.core.models.cohort_models import Subject
from app.core.models.generator_models import GeneratorConfig, TrueCurve
from app.core.services.kernels import sample_truncated_normal
from app.core.services.pipeline import CohortFile, CohortSidecar, apply_transform
from app.core.services.splines import BasisSpec, eval_basis

logger = get_logger()

MIN_GAP_DAYS: float = 1.0


class SubjectTruth(BaseModel):
    id: str
    z: int
    h: float
    w: float
    v: float
    responder: bool
    random_effects: list[float]


class GroundTruth(BaseModel):
    config: GeneratorConfig
    subjects: list[SubjectTruth] = Field(default_factory=list)


@dataclass(frozen=True, slots=True)
class GeneratedCohort:
    cohort: CohortFile
    truth: GroundTruth


def visit_schedule(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    jitter = rng.uniform(-config.visit_jitter, config.visit_jitter, size=config.n_visits)
    gaps = np.maximum(config.visit_interval_mean + jitter, MIN_GAP_DAYS)
    return np.concatenate(([0.0], np.cumsum(gaps)))


def _bracket(visits: np.ndarray, time: float) -> tuple[float, float]:
    """(last visit before ``time``, first visit at or after it)."""
    k = int(np.searchsorted(visits, time, side="left"))
    return float(visits[k - 1]), float(visits[k])


def _curve(spec_curve: TrueCurve, degree: int) -> tuple[BasisSpec, np.ndarray]:
    return BasisSpec(degree, tuple(spec_curve.knots)), np.asarray(spec_curve.coefficients, dtype=float)


def _covariates(config: GeneratorConfig, rng: np.random.Generator) -> tuple[float, ...]:
    values = []
    for name in config.covariate_names:
        if name == "cd4_pre":
            values.append(float(rng.uniform(*config.cd4_pre_range)))
        else:
            values.append(float(rng.random() < config.idu_prob))
    return tuple(values)


def _random_effects(poly: tuple[float, ...], knot: float, rng: np.random.Generator) -> np.ndarray:
    variances = np.array((*poly, knot), dtype=float)
    return rng.standard_normal(variances.size) * np.sqrt(variances)


def _simulate_subject(index: int, z: int, config: GeneratorConfig, rng: np.random.Generator) -> tuple[Subject, tuple[float, ...], SubjectTruth]:
    x_star = _covariates(config, rng)
    visits = visit_schedule(config, rng)
    h = sample_truncated_normal(config.h_mean[z], config.h_var[z], 0.0, float(visits[-1]), rng)
    w = sample_truncated_normal(config.w_mean[z], config.w_var[z], 0.0, math.inf, rng)
    v = h + w
    l_h, r_h = _bracket(visits, h)

    closing = int(np.searchsorted(visits, h, side="left"))
    last = visits.size - 1
    for k in range(closing + 1, visits.size):
        if rng.random() < config.dropout_prob:
            last = k - 1
            break
    attended = visits[: last + 1]

    responder = v <= attended[-1] and v <= config.T
    if responder:
        l_v, r_v = _bracket(attended, v)
    else:
        l_v, r_v = float(attended[attended < v][-1]), math.inf

    times = attended[attended >= r_h]
    scale = config.time_scale
    offset = float(np.dot(x_star, config.beta_star))
    if responder:
        basis, coefficients = _curve(config.responder_curves[z], config.degree)
        scaled = (times - v) / scale
        individual = BasisSpec(config.degree, (0.0,))
        effects = _random_effects(config.re_poly_var_b, config.re_knot_var_b, rng)
    else:
        basis, coefficients = _curve(config.nonresponder_curves[z], config.degree)
        scaled = times / scale
        individual = BasisSpec(config.degree, (0.5 * (times[0] + times[-1]) / scale,))
        effects = _random_effects(config.re_poly_var_a, config.re_knot_var_a, rng)

    means = (
        eval_basis(basis, scaled).reshape(times.size, -1) @ coefficients
        + eval_basis(individual, scaled).reshape(times.size, -1) @ effects
        + offset
    )
    y = means + rng.standard_normal(times.size) * math.sqrt(config.sigma2)
    y_raw = np.maximum(y, 0.0) ** 2 if config.outcome_transform == "sqrt" else y

    subject_id = f"S{index + 1:04d}"
    subject = Subject(
        id=subject_id,
        z=z,
        x_star=x_star,
        l_h=l_h,
        r_h=r_h,
        l_v=l_v,
        r_v=r_v,
        obs_t=tuple(float(t) for t in times),
        obs_y=tuple(float(value) for value in apply_transform(y_raw, config.outcome_transform)),
    )
    truth = SubjectTruth(
        id=subject_id,
        z=z,
        h=h,
        w=w,
        v=v,
        responder=bool(responder),
        random_effects=[float(value) for value in effects],
    )
    return subject, tuple(float(value) for value in y_raw), truth


def generate_cohort(config: GeneratorConfig, seed: int | None = None) -> GeneratedCohort:
    """Simulate a cohort from the hierarchical model; every subject has its own random substream."""
    groups = [0] * config.n_per_group[0] + [1] * config.n_per_group[1]
    streams = np.random.SeedSequence(config.seed if seed is None else seed).spawn(len(groups))

    subjects, raw_outcomes, truths = [], [], []
    for index, (z, stream) in enumerate(zip(groups, streams)):
        subject, raw, truth = _simulate_subject(index, z, config, np.random.default_rng(stream))
        subjects.append(subject)
        raw_outcomes.append(raw)
        truths.append(truth)

    responders = sum(truth.responder for truth in truths)
    if responders == 0:
        logger.warning("Generated cohort has no responders; every subject is right-censored.")
    logger.info("Generated %d subjects (%d responders).", len(subjects), responders)

    sidecar = CohortSidecar(
        covariate_names=config.covariate_names,
        outcome_transform=config.outcome_transform,
        T=config.T,
    )
    return GeneratedCohort(
        cohort=CohortFile(subjects=tuple(subjects), raw_outcomes=tuple(raw_outcomes), sidecar=sidecar),
        truth=GroundTruth(config=config, subjects=truths),
    )


def write_truth(truth: GroundTruth, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(truth.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target


def read_truth(path: str | Path) -> GroundTruth:
    return GroundTruth.model_validate_json(Path(path).read_text(encoding="utf-8"))
