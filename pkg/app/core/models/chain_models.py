from __future__ import annotations

from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ModelVariant(str, Enum):
    JOINT = "joint"
    MARGINAL = "marginal"


class IntervalDefinition(str, Enum):
    NARROW = "narrow"
    WIDE = "wide"


class SplineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    degree: int = Field(default=2, ge=1)
    n_quantile_knots_b: int = Field(default=19, ge=1)
    include_zero_b: bool = True
    n_quantile_knots_a: int = Field(default=20, ge=1)
    time_scale: float = Field(default=365.25, gt=0)


class PriorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    gamma_shape: float = Field(default=1e-3, gt=0)
    gamma_rate: float = Field(default=1e-3, gt=0)
    initial_variance: float = Field(default=1.0, gt=0)


class ChainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_iter: int = Field(default=7000, ge=1)
    burn_in: int = Field(default=2000, ge=0)
    n_chains: int = Field(default=2, ge=1)
    thin: int = Field(default=1, ge=1)
    seed: int | None = None
    alpha_h: float = Field(default=10.0, gt=0)
    alpha_w: float = Field(default=10.0, gt=0)
    metropolis_steps: int = Field(default=10, ge=1)
    quadrature_nodes: int = Field(default=20, ge=1)
    model_variant: ModelVariant = ModelVariant.JOINT
    log_every: int = Field(default=500, ge=1)
    debug_dump: str | None = None

    @model_validator(mode="after")
    def _burn_in_below_n_iter(self) -> ChainConfig:
        if self.burn_in >= self.n_iter:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than n_iter ({self.n_iter}).")
        return self

    @property
    def retained_per_chain(self) -> int:
        return len(range(self.burn_in + 1, self.n_iter + 1, self.thin))


class FitConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    chain: ChainConfig = Field(default_factory=ChainConfig)
    splines: SplineConfig = Field(default_factory=SplineConfig)
    priors: PriorConfig = Field(default_factory=PriorConfig)
    intervals: IntervalDefinition = IntervalDefinition.NARROW
    global_left: float | None = None


class RunManifest(BaseModel):
    subcommand: Literal["simulate", "fit", "summarize", "diagnose"]
    config_path: str | None = None
    inputs: list[str] = Field(default_factory=list)
    outputs: list[str] = Field(default_factory=list)
    seed: int | None = None
    chain_config: dict[str, Any] | None = None
    generator_config: dict[str, Any] | None = None
    options: dict[str, Any] = Field(default_factory=dict)
    notes: list[str] = Field(default_factory=list)
    tool_version: str
