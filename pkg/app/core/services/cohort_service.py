from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from app.core.config import get_logger
from app.core.errors import CohortValidationError, JointModelError, SupportViolationError
from app.core.models.cohort_models import Hyperparams, LatentState, Subject, ValidatedCohort

logger = get_logger()

INIT_MAX_TRIES: int = 100
DEFAULT_VISIT_GAP: float = 180.0


def _subject_messages(subject: Subject, n_covariates: int) -> list[str]:
    label = f"subject '{subject.id}'"
    messages: list[str] = []

    for name in ("l_h", "r_h", "l_v"):
        value = getattr(subject, name)
        if not math.isfinite(value):
            messages.append(f"{label}: {name} must be finite, got {value}.")
        elif value < 0:
            messages.append(f"{label}: {name} must be >= 0, got {value}.")
    if math.isnan(subject.r_v) or subject.r_v == -math.inf:
        messages.append(f"{label}: r_v must be a day value or +inf, got {subject.r_v}.")

    if not subject.l_h < subject.r_h:
        messages.append(f"{label}: l_h < r_h violated (l_h={subject.l_h}, r_h={subject.r_h}).")
    if not subject.l_v < subject.r_v:
        messages.append(f"{label}: l_v < r_v violated (l_v={subject.l_v}, r_v={subject.r_v}).")

    if len(subject.x_star) != n_covariates:
        messages.append(f"{label}: expected {n_covariates} covariates, got {len(subject.x_star)}.")
    elif not all(math.isfinite(value) for value in subject.x_star):
        messages.append(f"{label}: covariates must be finite.")

    if len(subject.obs_t) == 0:
        messages.append(f"{label}: at least one observation is required.")
    if len(subject.obs_t) != len(subject.obs_y):
        messages.append(f"{label}: {len(subject.obs_t)} observation times but {len(subject.obs_y)} outcomes.")
    times = np.asarray(subject.obs_t, dtype=float)
    if times.size:
        if not np.all(np.isfinite(times)) or np.any(times < 0):
            messages.append(f"{label}: observation times must be finite and >= 0.")
        if np.any(np.diff(times) <= 0):
            messages.append(f"{label}: observation times must be strictly increasing.")
    if not all(math.isfinite(value) for value in subject.obs_y):
        messages.append(f"{label}: outcomes must be finite.")
    return messages


def validate_cohort(
    subjects: Sequence[Subject] | ValidatedCohort,
    hp: Hyperparams,
    covariate_names: Sequence[str] | None = None,
) -> ValidatedCohort:
    """Check every subject invariant and return the array view with responder flags."""
    if isinstance(subjects, ValidatedCohort):
        covariate_names = subjects.covariate_names if covariate_names is None else covariate_names
        subjects = subjects.subjects

    subjects = tuple(subjects)
    if not subjects:
        raise CohortValidationError(["cohort is empty."])

    n_covariates = len(subjects[0].x_star)
    if covariate_names is None:
        covariate_names = tuple(f"x{k}" for k in range(n_covariates))
    covariate_names = tuple(covariate_names)

    messages: list[str] = []
    if len(covariate_names) != n_covariates:
        messages.append(f"expected {len(covariate_names)} covariate names for {n_covariates} covariates.")

    seen: set[str] = set()
    for subject in subjects:
        if subject.id in seen:
            messages.append(f"subject '{subject.id}': duplicate id.")
        seen.add(subject.id)
        messages.extend(_subject_messages(subject, n_covariates))
    if messages:
        raise CohortValidationError(messages)

    z = np.array([subject.z for subject in subjects], dtype=int)
    r_v = np.array([subject.r_v for subject in subjects], dtype=float)
    responder = np.isfinite(r_v)

    warnings: list[str] = []
    for group in (0, 1):
        if not np.any(z == group):
            warnings.append(f"group z={group} has no subjects; its base measures keep their initial values.")
    late = np.flatnonzero(responder & (r_v > hp.T))
    if late.size:
        warnings.append(f"{late.size} responder(s) have r_v beyond T={hp.T}.")
    for message in warnings:
        logger.warning(message)

    x_star = np.array([subject.x_star for subject in subjects], dtype=float).reshape(len(subjects), n_covariates)
    return ValidatedCohort(
        subjects=subjects,
        covariate_names=covariate_names,
        ids=tuple(subject.id for subject in subjects),
        z=z,
        responder=responder,
        x_star=x_star,
        l_h=np.array([subject.l_h for subject in subjects], dtype=float),
        r_h=np.array([subject.r_h for subject in subjects], dtype=float),
        l_v=np.array([subject.l_v for subject in subjects], dtype=float),
        r_v=r_v,
        t=tuple(np.asarray(subject.obs_t, dtype=float) for subject in subjects),
        y=tuple(np.asarray(subject.obs_y, dtype=float) for subject in subjects),
        warnings=tuple(warnings),
    )


def h_bounds(cohort: ValidatedCohort, i: int, v: float) -> tuple[float, float]:
    return float(cohort.l_h[i]), float(min(cohort.r_h[i], v))


def w_bounds(cohort: ValidatedCohort, i: int, h: float) -> tuple[float, float]:
    """(lo, hi] for w_i given h_i; hi is +inf for right-censored subjects."""
    return float(max(0.0, cohort.l_v[i] - h)), float(cohort.r_v[i] - h)


def w_in_bounds(cohort: ValidatedCohort, i: int, h: float, w: float) -> bool:
    lo, hi = w_bounds(cohort, i, h)
    return lo < w <= hi


def median_visit_gap(cohort: ValidatedCohort) -> float:
    gaps = [np.diff(times) for times in cohort.t if times.size > 1]
    if not gaps:
        return DEFAULT_VISIT_GAP
    return float(np.median(np.concatenate(gaps)))


def _uniform_left_open(lo: float, hi: float, rng: np.random.Generator) -> float:
    return hi - (hi - lo) * rng.random()


def init_latent(cohort: ValidatedCohort, rng: np.random.Generator) -> LatentState:
    """Uniform interior starting values that satisfy both truncation intervals."""
    gap = median_visit_gap(cohort)
    h = np.empty(cohort.size)
    w = np.empty(cohort.size)

    for i in range(cohort.size):
        l_h, r_h, l_v, r_v = cohort.l_h[i], cohort.r_h[i], cohort.l_v[i], cohort.r_v[i]
        if not l_h < r_v:
            raise JointModelError(
                f"Subject '{cohort.ids[i]}' has infeasible intervals: l_h={l_h} is not below r_v={r_v}."
            )
        upper_v = min(r_v, max(l_v, l_h) + 2.0 * gap)

        for _ in range(INIT_MAX_TRIES):
            h_i = _uniform_left_open(l_h, r_h, rng)
            v_i = _uniform_left_open(l_v, upper_v, rng)
            if v_i > h_i and w_in_bounds(cohort, i, h_i, v_i - h_i):
                break
        else:
            h_i = 0.5 * (l_h + min(r_h, upper_v))
            v_i = 0.5 * (max(l_v, h_i) + upper_v)

        h[i] = h_i
        w[i] = v_i - h_i

    latent = LatentState(h=h, w=w)
    assert_support(latent, cohort)
    return latent


def support_violations(latent: LatentState, cohort: ValidatedCohort) -> np.ndarray:
    h, w = latent.h, latent.w
    v = h + w
    h_ok = (cohort.l_h < h) & (h <= np.minimum(cohort.r_h, v))
    w_ok = (np.maximum(0.0, cohort.l_v - h) < w) & (w <= cohort.r_v - h) & (w > 0)
    return np.flatnonzero(~(h_ok & w_ok))


def assert_support(latent: LatentState, cohort: ValidatedCohort) -> None:
    bad = support_violations(latent, cohort)
    if bad.size:
        i = int(bad[0])
        raise SupportViolationError(
            f"{bad.size} subject(s) outside their truncation intervals; first is '{cohort.ids[i]}' "
            f"(h={latent.h[i]}, w={latent.w[i]})."
        )
