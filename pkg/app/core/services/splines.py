from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from app.core.config import get_logger
from app.core.models.chain_models import SplineConfig
from app.core.models.cohort_models import ValidatedCohort

logger = get_logger()


@dataclass(frozen=True, slots=True)
class BasisSpec:
    """Truncated polynomial basis (1, t, ..., t^p, (t - k_1)_+^p, ..., (t - k_K)_+^p)."""

    degree: int
    knots: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ValueError(f"Spline degree must be >= 1, got {self.degree}.")
        knots = np.asarray(self.knots, dtype=float)
        if knots.size and (not np.all(np.isfinite(knots)) or np.any(np.diff(knots) <= 0)):
            raise ValueError(f"Knots must be finite and strictly increasing, got {self.knots}.")

    @property
    def dimension(self) -> int:
        return 1 + self.degree + len(self.knots)

    @property
    def n_knots(self) -> int:
        return len(self.knots)


def eval_basis(spec: BasisSpec, t: float | np.ndarray) -> np.ndarray:
    """Basis row for scalar ``t``; one row per element for array input."""
    points = np.asarray(t, dtype=float)
    flat = np.atleast_1d(points).ravel()
    powers = flat[:, None] ** np.arange(spec.degree + 1)
    if spec.knots:
        shifted = flat[:, None] - np.asarray(spec.knots)[None, :]
        truncated = np.where(shifted > 0.0, np.maximum(shifted, 0.0) ** spec.degree, 0.0)
        rows = np.hstack((powers, truncated))
    else:
        rows = powers
    return rows[0] if points.ndim == 0 else rows.reshape(points.shape + (spec.dimension,))


def eval_derivative(spec: BasisSpec, t: float | np.ndarray) -> np.ndarray:
    points = np.asarray(t, dtype=float)
    flat = np.atleast_1d(points).ravel()
    exponents = np.arange(spec.degree + 1)
    powers = np.zeros((flat.size, spec.degree + 1))
    powers[:, 1:] = exponents[1:] * flat[:, None] ** (exponents[1:] - 1)
    if spec.knots:
        shifted = flat[:, None] - np.asarray(spec.knots)[None, :]
        truncated = np.where(
            shifted >= 0.0,
            spec.degree * np.maximum(shifted, 0.0) ** (spec.degree - 1),
            0.0,
        )
        rows = np.hstack((powers, truncated))
    else:
        rows = powers
    return rows[0] if points.ndim == 0 else rows.reshape(points.shape + (spec.dimension,))


def _type1_quantile(sorted_values: np.ndarray, level: float) -> float:
    position = max(int(math.ceil(level * sorted_values.size)), 1)
    return float(sorted_values[position - 1])


def place_knots(times: np.ndarray, n_knots: int, include_zero: bool = False) -> tuple[float, ...]:
    """Knots at the k/(n_knots + 1) sample quantiles (order-statistic rule), plus 0 when asked."""
    values = np.sort(np.asarray(times, dtype=float).ravel())
    if values.size == 0:
        raise ValueError("Knot placement needs at least one time value.")
    if n_knots < 1:
        raise ValueError(f"n_knots must be >= 1, got {n_knots}.")

    levels = np.arange(1, n_knots + 1) / (n_knots + 1)
    candidates = [_type1_quantile(values, level) for level in levels]
    if include_zero:
        candidates.append(0.0)
    knots = tuple(float(knot) for knot in np.unique(candidates))

    requested = n_knots + (1 if include_zero else 0)
    if len(knots) < requested:
        logger.warning(
            "Collapsed %d requested knots to %d distinct values (%d distinct input times).",
            requested,
            len(knots),
            np.unique(values).size,
        )
    return knots


@dataclass(frozen=True, slots=True)
class SplineBases:
    """Frozen bases of one fit. Knots are on the model time scale (days / time_scale), ranges in days."""

    population_responder: BasisSpec
    population_nonresponder: BasisSpec
    individual_responder: BasisSpec
    individual_nonresponder: tuple[BasisSpec | None, ...]
    time_scale: float
    realigned_range: tuple[float, float]
    calendar_range: tuple[float, float]

    @property
    def degree(self) -> int:
        return self.population_responder.degree

    @property
    def dim_phi(self) -> int:
        return self.individual_responder.dimension

    @property
    def dim_psi(self) -> int:
        return 1 + self.degree + 1

    def individual_basis(self, i: int, responder: bool) -> BasisSpec:
        if responder:
            return self.individual_responder
        spec = self.individual_nonresponder[i]
        if spec is None:
            raise ValueError(f"Subject index {i} has no nonresponder basis.")
        return spec

    def to_payload(self) -> dict[str, object]:
        return {
            "degree": self.degree,
            "time_scale": self.time_scale,
            "knots_b": list(self.population_responder.knots),
            "knots_a": list(self.population_nonresponder.knots),
            "knots_phi": list(self.individual_responder.knots),
            "knots_psi": [None if spec is None else spec.knots[0] for spec in self.individual_nonresponder],
            "realigned_range": list(self.realigned_range),
            "calendar_range": list(self.calendar_range),
        }

    @classmethod
    def from_payload(cls, payload: dict[str, object]) -> SplineBases:
        degree = int(payload["degree"])
        return cls(
            population_responder=BasisSpec(degree, tuple(payload["knots_b"])),
            population_nonresponder=BasisSpec(degree, tuple(payload["knots_a"])),
            individual_responder=BasisSpec(degree, tuple(payload["knots_phi"])),
            individual_nonresponder=tuple(
                None if knot is None else BasisSpec(degree, (float(knot),)) for knot in payload["knots_psi"]
            ),
            time_scale=float(payload["time_scale"]),
            realigned_range=tuple(payload["realigned_range"]),
            calendar_range=tuple(payload["calendar_range"]),
        )


def _midpoint_realigned_times(cohort: ValidatedCohort) -> np.ndarray:
    chunks = [
        cohort.t[i] - 0.5 * (cohort.l_v[i] + cohort.r_v[i])
        for i in range(cohort.size)
        if cohort.responder[i]
    ]
    return np.concatenate(chunks) if chunks else np.zeros(1)


def build_spline_bases(cohort: ValidatedCohort, config: SplineConfig) -> SplineBases:
    """Place every knot once, before sampling; the bases stay fixed for the whole run."""
    scale = config.time_scale
    realigned = _midpoint_realigned_times(cohort)
    nonresponder_chunks = [cohort.t[i] for i in range(cohort.size) if not cohort.responder[i]]
    calendar = np.concatenate(nonresponder_chunks) if nonresponder_chunks else np.concatenate(cohort.t)

    knots_b = place_knots(realigned / scale, config.n_quantile_knots_b, include_zero=config.include_zero_b)
    knots_a = place_knots(calendar / scale, config.n_quantile_knots_a, include_zero=False)

    individual_nonresponder: list[BasisSpec | None] = []
    for i in range(cohort.size):
        if cohort.responder[i]:
            individual_nonresponder.append(None)
            continue
        times = cohort.t[i]
        midpoint = 0.5 * (float(times[0]) + float(times[-1])) / scale
        individual_nonresponder.append(BasisSpec(config.degree, (midpoint,)))

    return SplineBases(
        population_responder=BasisSpec(config.degree, knots_b),
        population_nonresponder=BasisSpec(config.degree, knots_a),
        individual_responder=BasisSpec(config.degree, (0.0,)),
        individual_nonresponder=tuple(individual_nonresponder),
        time_scale=scale,
        realigned_range=(float(realigned.min()), float(realigned.max())),
        calendar_range=(float(calendar.min()), float(calendar.max())),
    )
