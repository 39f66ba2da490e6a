from __future__ import annotations

from pydantic import BaseModel, Field

from app.core.models.chain_models import ModelVariant


class Estimate(BaseModel):
    """Posterior mean with a central 95% credible interval; ``None`` marks a missing cell."""

    mean: float | None = None
    lower: float | None = None
    upper: float | None = None


class PercentileRow(BaseModel):
    level: float
    z1: float | None = None
    z0: float | None = None


class ProportionRow(BaseModel):
    quantity: str
    z1: Estimate
    z0: Estimate
    difference: Estimate


class CovariateEffect(BaseModel):
    name: str
    estimate: Estimate


class SummaryReport(BaseModel):
    variant: ModelVariant
    n_chains: int
    n_draws: int
    seed: int
    T: float
    pooled_percentiles: bool = False
    percentiles: list[PercentileRow] = Field(default_factory=list)
    proportions: list[ProportionRow] = Field(default_factory=list)
    hazard_grid_step: float = 30.0
    covariate_effects: list[CovariateEffect] = Field(default_factory=list)
    difference_at_suppression: dict[str, Estimate] | None = None
    figures: list[str] = Field(default_factory=list)
    notes: list[str] = Field(default_factory=list)
