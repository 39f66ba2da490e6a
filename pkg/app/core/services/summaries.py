from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from app.core.config import get_logger
from app.core.errors import InsufficientDrawsError
from app.core.models.draws_models import PosteriorDraws
from app.core.models.report_models import CovariateEffect, Estimate, PercentileRow, ProportionRow, SummaryReport
from app.core.services.outcome_sampler import spline_block
from app.core.services.splines import eval_basis, eval_derivative

logger = get_logger()

PERCENTILE_LEVELS: tuple[float, ...] = (5.0, 25.0, 50.0, 75.0, 95.0)
PROPORTION_THRESHOLDS: tuple[float, ...] = (90.0, 180.0)
BAND_LEVELS: tuple[float, float] = (2.5, 97.5)
QUANTILE_METHOD = "hazen"
GROUPS: tuple[int, int] = (1, 0)


def _estimate(samples: np.ndarray) -> Estimate:
    values = np.asarray(samples, dtype=float).ravel()
    values = values[np.isfinite(values)]
    if values.size == 0:
        return Estimate()
    lower, upper = np.percentile(values, BAND_LEVELS, method=QUANTILE_METHOD)
    return Estimate(mean=float(values.mean()), lower=float(lower), upper=float(upper))


def _cell(draws: PosteriorDraws, group: int) -> np.ndarray:
    cohort = draws.cohort
    return cohort.responder & (cohort.z == group)


def event_percentiles(
    draws: PosteriorDraws,
    levels: Sequence[float] = PERCENTILE_LEVELS,
    group: int = 1,
    pooled: bool = False,
) -> dict[float, float | None]:
    """Posterior mean of the per-iteration empirical W percentiles among responders of ``group``.

    With ``pooled`` the percentiles of all pooled imputations are returned instead.
    """
    draws.require()
    mask = _cell(draws, group)
    if not mask.any():
        return {float(level): None for level in levels}
    w = draws.pooled("w")[:, mask]
    if pooled:
        values = np.percentile(w.ravel(), levels, method=QUANTILE_METHOD)
    else:
        values = np.percentile(w, levels, axis=1, method=QUANTILE_METHOD).mean(axis=1)
    return {float(level): float(value) for level, value in zip(levels, values)}


def responder_proportions(
    draws: PosteriorDraws,
    thresholds: Sequence[float] = PROPORTION_THRESHOLDS,
    T: float | None = None,
) -> list[ProportionRow]:
    """p(V<=T) and p(W<=c | V<=T) per group with the z0 - z1 difference, all from per-iteration values."""
    draws.require()
    horizon = draws.cohort.T if T is None else float(T)
    h, w = draws.pooled("h"), draws.pooled("w")
    v = h + w
    iterations = h.shape[0]

    per_group: dict[int, dict[str, np.ndarray]] = {}
    for group in GROUPS:
        members = draws.cohort.z == group
        quantities: dict[str, np.ndarray] = {}
        if not members.any():
            quantities["p(V<=T)"] = np.full(iterations, math.nan)
            for c in thresholds:
                quantities[f"p(W<={c:g}|V<=T)"] = np.full(iterations, math.nan)
            per_group[group] = quantities
            continue
        suppressed = v[:, members] <= horizon
        quantities["p(V<=T)"] = suppressed.mean(axis=1)
        at_risk = suppressed.sum(axis=1)
        for c in thresholds:
            hits = ((w[:, members] <= c) & suppressed).sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                quantities[f"p(W<={c:g}|V<=T)"] = np.where(at_risk > 0, hits / np.maximum(at_risk, 1), math.nan)
        per_group[group] = quantities

    rows: list[ProportionRow] = []
    for name in per_group[1]:
        first, second = per_group[1][name], per_group[0][name]
        rows.append(
            ProportionRow(
                quantity=name,
                z1=_estimate(first),
                z0=_estimate(second),
                difference=_estimate(second - first),
            )
        )
    return rows


@dataclass(frozen=True, slots=True)
class HazardCurve:
    group: int
    starts: np.ndarray
    stops: np.ndarray
    hazard: np.ndarray
    mean_at_risk: np.ndarray


def hazard_curve(draws: PosteriorDraws, group: int = 1, grid_step: float = 30.0) -> HazardCurve:
    """Per-cell posterior mean of #{w in [t1, t2)} / #{w >= t1} among responders; NaN where nobody is at risk."""
    if not grid_step > 0:
        raise ValueError(f"grid_step must be positive, got {grid_step}.")
    draws.require()
    mask = _cell(draws, group)
    if not mask.any():
        empty = np.zeros(0)
        return HazardCurve(group, empty, empty, empty, empty)

    w = draws.pooled("w")[:, mask]
    cell = np.floor(w / grid_step).astype(int)
    n_cells = int(cell.max()) + 1
    events = np.zeros((w.shape[0], n_cells))
    np.add.at(events, (np.repeat(np.arange(w.shape[0]), w.shape[1]), cell.ravel()), 1.0)
    at_risk = np.cumsum(events[:, ::-1], axis=1)[:, ::-1]

    observed = at_risk > 0
    ratios = np.divide(events, at_risk, out=np.zeros_like(events), where=observed)
    counts = observed.sum(axis=0)
    hazard = np.divide(ratios.sum(axis=0), counts, out=np.full(n_cells, math.nan), where=counts > 0)

    starts = np.arange(n_cells) * grid_step
    return HazardCurve(group, starts, starts + grid_step, hazard, at_risk.mean(axis=0))


@dataclass(frozen=True, slots=True)
class CurveBand:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass(frozen=True, slots=True)
class CurveSummary:
    grid: np.ndarray
    level: CurveBand
    derivative: CurveBand
    original: CurveBand
    original_derivative: CurveBand


def _band(samples: np.ndarray) -> CurveBand:
    lower, upper = np.percentile(samples, BAND_LEVELS, axis=0, method=QUANTILE_METHOD)
    return CurveBand(mean=samples.mean(axis=0), lower=lower, upper=upper)


def _require_theta(draws: PosteriorDraws) -> None:
    if not draws.has_theta:
        raise InsufficientDrawsError("insufficient draws: this fit stores no outcome-model parameters.")


def reference_covariates(draws: PosteriorDraws) -> np.ndarray:
    x_star = draws.cohort.x_star
    return x_star.mean(axis=0) if x_star.shape[0] else np.zeros(x_star.shape[1])


def curve_grid(draws: PosteriorDraws, responder: bool, n_grid: int = 101) -> np.ndarray:
    """Evenly spaced days over the realigned (responder) or calendar (nonresponder) data range."""
    lo, hi = draws.bases.realigned_range if responder else draws.bases.calendar_range
    return np.linspace(lo, hi, n_grid)


def _curve_draws(
    draws: PosteriorDraws,
    group: int,
    responder: bool,
    grid: np.ndarray,
    reference: np.ndarray,
) -> dict[str, np.ndarray]:
    bases = draws.bases
    spec = bases.population_responder if responder else bases.population_nonresponder
    scaled = np.asarray(grid, dtype=float) / bases.time_scale
    coefficients = draws.pooled(spline_block(responder, group))
    offset = draws.pooled("beta_star") @ reference

    level = coefficients @ eval_basis(spec, scaled).T + offset[:, None]
    slope = coefficients @ eval_derivative(spec, scaled).T
    return {
        "level": level,
        "derivative": slope,
        "original": level**2,
        "original_derivative": 2.0 * level * slope,
    }


def _summarize(grid: np.ndarray, samples: dict[str, np.ndarray]) -> CurveSummary:
    return CurveSummary(
        grid=np.asarray(grid, dtype=float),
        level=_band(samples["level"]),
        derivative=_band(samples["derivative"]),
        original=_band(samples["original"]),
        original_derivative=_band(samples["original_derivative"]),
    )


def _resolve_curve_inputs(
    draws: PosteriorDraws,
    responder: bool,
    reference: np.ndarray | None,
    grid: np.ndarray | None,
    n_grid: int,
) -> tuple[np.ndarray, np.ndarray]:
    _require_theta(draws)
    draws.require()
    reference = reference_covariates(draws) if reference is None else np.asarray(reference, dtype=float)
    grid = curve_grid(draws, responder, n_grid) if grid is None else np.asarray(grid, dtype=float)
    lo, hi = draws.bases.realigned_range if responder else draws.bases.calendar_range
    if grid.size and (grid.min() < lo or grid.max() > hi):
        logger.warning(
            "Curve grid [%g, %g] extends past the data range [%g, %g]; values there are extrapolated.",
            grid.min(),
            grid.max(),
            lo,
            hi,
        )
    return grid, reference


def population_curves(
    draws: PosteriorDraws,
    group: int,
    responder: bool,
    reference: np.ndarray | None = None,
    grid: np.ndarray | None = None,
    n_grid: int = 101,
) -> CurveSummary:
    """Posterior mean profile and velocity with pointwise 95% bands, on both outcome scales.

    Responder curves are indexed by days since suppression, nonresponder curves by days since enrollment.
    The original scale squares each draw before summarizing.
    """
    grid, reference = _resolve_curve_inputs(draws, responder, reference, grid, n_grid)
    return _summarize(grid, _curve_draws(draws, group, responder, grid, reference))


def difference_curves(
    draws: PosteriorDraws,
    responder: bool,
    reference: np.ndarray | None = None,
    grid: np.ndarray | None = None,
    n_grid: int = 101,
) -> CurveSummary:
    """z0 minus z1 profiles, differenced per draw before the bands are taken."""
    grid, reference = _resolve_curve_inputs(draws, responder, reference, grid, n_grid)
    first = _curve_draws(draws, 1, responder, grid, reference)
    second = _curve_draws(draws, 0, responder, grid, reference)
    return _summarize(grid, {key: second[key] - first[key] for key in first})


def curve_at(
    draws: PosteriorDraws,
    time: float = 0.0,
    responder: bool = True,
    reference: np.ndarray | None = None,
    scale: str = "original",
) -> dict[str, Estimate]:
    """Group curves and their z0 - z1 difference at a single time."""
    key = "original" if scale == "original" else "level"
    grid, reference = _resolve_curve_inputs(draws, responder, reference, np.array([float(time)]), 1)
    first = _curve_draws(draws, 1, responder, grid, reference)[key][:, 0]
    second = _curve_draws(draws, 0, responder, grid, reference)[key][:, 0]
    return {"z1": _estimate(first), "z0": _estimate(second), "difference": _estimate(second - first)}


def covariate_effects(draws: PosteriorDraws) -> list[CovariateEffect]:
    _require_theta(draws)
    draws.require()
    beta_star = draws.pooled("beta_star")
    return [
        CovariateEffect(name=name, estimate=_estimate(beta_star[:, k]))
        for k, name in enumerate(draws.cohort.covariate_names)
    ]


@dataclass(frozen=True, slots=True)
class SubjectPredictive:
    subject_id: str
    times: np.ndarray
    draw_index: np.ndarray
    mean_curves: np.ndarray
    predictive_curves: np.ndarray

    @property
    def average_mean(self) -> np.ndarray:
        return self.mean_curves.mean(axis=0)

    @property
    def average_predictive(self) -> np.ndarray:
        return self.predictive_curves.mean(axis=0)


def subject_predictive(
    draws: PosteriorDraws,
    subject: int | str,
    n_samples: int = 50,
    times: np.ndarray | None = None,
) -> SubjectPredictive:
    """Mean and noisy predictive curves of one subject from ``n_samples`` retained iterations."""
    _require_theta(draws)
    cohort = draws.cohort
    i = cohort.index_of(subject) if isinstance(subject, str) else int(subject)
    if not 0 <= i < cohort.size:
        raise KeyError(f"Subject index {i} is out of range.")
    if n_samples > draws.total:
        raise InsufficientDrawsError(f"insufficient draws: asked for {n_samples}, have {draws.total}.")

    rng = np.random.default_rng([draws.seed, i])
    picks = np.sort(rng.choice(draws.total, size=n_samples, replace=False))
    times = cohort.t[i] if times is None else np.asarray(times, dtype=float)

    bases = draws.bases
    responder = bool(cohort.responder[i])
    block = spline_block(responder, int(cohort.z[i]))
    coefficients = draws.pooled(block)[picks]
    individual = draws.pooled("b" if responder else "a")[picks, i]
    offset = draws.pooled("beta_star")[picks] @ cohort.x_star[i]
    sigma2 = draws.pooled("sigma2")[picks]

    if responder:
        v = (draws.pooled("h")[picks, i] + draws.pooled("w")[picks, i])[:, None]
        scaled = (times[None, :] - v) / bases.time_scale
        fixed = eval_basis(bases.population_responder, scaled)
    else:
        scaled = np.broadcast_to(times / bases.time_scale, (n_samples, times.size))
        fixed = eval_basis(bases.population_nonresponder, scaled)
    own = eval_basis(bases.individual_basis(i, responder), scaled)

    means = (
        np.einsum("kjd,kd->kj", fixed, coefficients)
        + np.einsum("kjd,kd->kj", own, individual)
        + offset[:, None]
    )
    noise = rng.standard_normal(means.shape) * np.sqrt(sigma2)[:, None]
    return SubjectPredictive(
        subject_id=cohort.ids[i],
        times=times,
        draw_index=picks,
        mean_curves=means,
        predictive_curves=means + noise,
    )


def _curve_frame(summaries: dict[str, CurveSummary]) -> pd.DataFrame:
    frames = []
    for group, summary in summaries.items():
        for scale, level, slope in (
            ("transformed", summary.level, summary.derivative),
            ("original", summary.original, summary.original_derivative),
        ):
            for quantity, band in (("level", level), ("derivative", slope)):
                frames.append(
                    pd.DataFrame(
                        {
                            "group": group,
                            "scale": scale,
                            "quantity": quantity,
                            "time": summary.grid,
                            "mean": band.mean,
                            "lower": band.lower,
                            "upper": band.upper,
                        }
                    )
                )
    return pd.concat(frames, ignore_index=True)


def _predictive_subjects(draws: PosteriorDraws) -> list[int]:
    cohort = draws.cohort
    chosen: list[int] = []
    for responder in (True, False):
        for group in GROUPS:
            members = np.flatnonzero((cohort.responder == responder) & (cohort.z == group))
            if members.size:
                chosen.append(int(members[0]))
    return chosen


def build_report(
    draws: PosteriorDraws,
    levels: Sequence[float] = PERCENTILE_LEVELS,
    thresholds: Sequence[float] = PROPORTION_THRESHOLDS,
    grid_step: float = 30.0,
    n_grid: int = 101,
    pooled_percentiles: bool = False,
    predictive_subjects: Sequence[str] | None = None,
    n_predictive: int = 50,
) -> tuple[SummaryReport, dict[str, pd.DataFrame]]:
    """The JSON report and the per-figure tables, all pure functions of ``draws``."""
    draws.require()
    notes = list(draws.notes)
    figures: dict[str, pd.DataFrame] = {}

    by_group = {group: event_percentiles(draws, levels, group, pooled_percentiles) for group in GROUPS}
    percentiles = [PercentileRow(level=float(level), z1=by_group[1][float(level)], z0=by_group[0][float(level)]) for level in levels]
    for group in GROUPS:
        if not _cell(draws, group).any():
            notes.append(f"No responders with z={group}; percentile and hazard cells are missing.")
    figures["percentiles.csv"] = pd.DataFrame(
        {"level": [row.level for row in percentiles], "z1": [row.z1 for row in percentiles], "z0": [row.z0 for row in percentiles]}
    )

    proportions = responder_proportions(draws, thresholds)
    figures["proportions.csv"] = pd.DataFrame(
        [
            {"quantity": row.quantity, "group": label, "mean": value.mean, "lower": value.lower, "upper": value.upper}
            for row in proportions
            for label, value in (("z1", row.z1), ("z0", row.z0), ("difference", row.difference))
        ],
        columns=["quantity", "group", "mean", "lower", "upper"],
    )

    hazards = [hazard_curve(draws, group, grid_step) for group in GROUPS]
    figures["hazard.csv"] = pd.DataFrame(
        {
            "group": np.concatenate([np.full(curve.starts.size, f"z{curve.group}") for curve in hazards]),
            "start": np.concatenate([curve.starts for curve in hazards]),
            "stop": np.concatenate([curve.stops for curve in hazards]),
            "hazard": np.concatenate([curve.hazard for curve in hazards]),
            "mean_at_risk": np.concatenate([curve.mean_at_risk for curve in hazards]),
        }
    )

    effects: list[CovariateEffect] = []
    at_suppression = None
    if draws.has_theta:
        effects = covariate_effects(draws)
        figures["covariates.csv"] = pd.DataFrame(
            [
                {"name": item.name, "mean": item.estimate.mean, "lower": item.estimate.lower, "upper": item.estimate.upper}
                for item in effects
            ],
            columns=["name", "mean", "lower", "upper"],
        )
        for responder, label in ((True, "responder"), (False, "nonresponder")):
            if not np.any(draws.cohort.responder == responder):
                notes.append(f"No {label}s in the cohort; {label} curves are omitted.")
                continue
            grid = curve_grid(draws, responder, n_grid)
            figures[f"curves_{label}.csv"] = _curve_frame(
                {
                    "z1": population_curves(draws, 1, responder, grid=grid),
                    "z0": population_curves(draws, 0, responder, grid=grid),
                    "difference": difference_curves(draws, responder, grid=grid),
                }
            )
        if np.any(draws.cohort.responder):
            at_suppression = curve_at(draws, 0.0, responder=True)

        chosen = (
            [draws.cohort.index_of(subject_id) for subject_id in predictive_subjects]
            if predictive_subjects is not None
            else _predictive_subjects(draws)
        )
        samples = min(n_predictive, draws.total)
        rows = []
        for i in chosen:
            predictive = subject_predictive(draws, i, samples)
            for k in range(samples):
                rows.append(
                    pd.DataFrame(
                        {
                            "id": predictive.subject_id,
                            "sample": k,
                            "time": predictive.times,
                            "mean": predictive.mean_curves[k],
                            "predictive": predictive.predictive_curves[k],
                        }
                    )
                )
        if rows:
            figures["predictive.csv"] = pd.concat(rows, ignore_index=True)

    report = SummaryReport(
        variant=draws.variant,
        n_chains=draws.n_chains,
        n_draws=draws.n_draws,
        seed=draws.seed,
        T=draws.cohort.T,
        pooled_percentiles=pooled_percentiles,
        percentiles=percentiles,
        proportions=proportions,
        hazard_grid_step=grid_step,
        covariate_effects=effects,
        difference_at_suppression=at_suppression,
        figures=sorted(figures),
        notes=notes,
    )
    return report, figures
