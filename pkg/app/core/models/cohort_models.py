from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

LAMBDA_LABELS: tuple[str, ...] = ("mu1", "mu0", "tau1", "tau0")


class Subject(BaseModel):
    """One cohort member on the analysis scale; times are days since enrollment."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    z: Literal[0, 1]
    x_star: tuple[float, ...] = ()
    l_h: float
    r_h: float
    l_v: float
    r_v: float
    obs_t: tuple[float, ...] = ()
    obs_y: tuple[float, ...] = ()

    @property
    def obs(self) -> list[tuple[float, float]]:
        return list(zip(self.obs_t, self.obs_y))

    @property
    def right_censored(self) -> bool:
        return bool(np.isinf(self.r_v))


@dataclass(frozen=True, slots=True)
class ValidatedCohort:
    """Array view over validated subjects; shared read-only by every sampler."""

    subjects: tuple[Subject, ...]
    covariate_names: tuple[str, ...]
    ids: tuple[str, ...]
    z: np.ndarray
    responder: np.ndarray
    x_star: np.ndarray
    l_h: np.ndarray
    r_h: np.ndarray
    l_v: np.ndarray
    r_v: np.ndarray
    t: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    warnings: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return len(self.subjects)

    @property
    def n_covariates(self) -> int:
        return int(self.x_star.shape[1])

    @property
    def n_observations(self) -> int:
        return int(sum(len(times) for times in self.t))

    def index_of(self, subject_id: str) -> int:
        try:
            return self.ids.index(subject_id)
        except ValueError as exc:
            raise KeyError(f"Subject '{subject_id}' is not part of the cohort.") from exc

    def group(self, z: int) -> np.ndarray:
        return np.flatnonzero(self.z == z)


@dataclass(slots=True)
class LatentState:
    h: np.ndarray
    w: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.h + self.w

    def copy(self) -> LatentState:
        return LatentState(h=self.h.copy(), w=self.w.copy())


@dataclass(frozen=True, slots=True)
class BaseMeasureParams:
    """Normal base-measure means (days) and variances (days^2), indexed by group z."""

    mu: tuple[float, float]
    tau: tuple[float, float]

    def __post_init__(self) -> None:
        if not all(value > 0 for value in self.tau):
            raise ValueError(f"Base-measure variances must be positive, got {self.tau}.")

    def as_vector(self) -> np.ndarray:
        return np.array([self.mu[1], self.mu[0], self.tau[1], self.tau[0]], dtype=float)

    def with_group(self, z: int, mu: float, tau: float) -> BaseMeasureParams:
        means = list(self.mu)
        variances = list(self.tau)
        means[z] = float(mu)
        variances[z] = float(tau)
        return BaseMeasureParams(mu=(means[0], means[1]), tau=(variances[0], variances[1]))


class Hyperparams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha_h: float = Field(default=10.0, gt=0)
    alpha_w: float = Field(default=10.0, gt=0)
    gamma_shape: float = Field(default=1e-3, gt=0)
    gamma_rate: float = Field(default=1e-3, gt=0)
    T: float = Field(default=2190.0, gt=0)
    p: int = Field(default=2, ge=1)
    K_B: int = Field(default=20, ge=0)
    K_A: int = Field(default=20, ge=0)
    K_phi: int = Field(default=1, ge=0)
    K_psi: int = Field(default=1, ge=0)

    @model_validator(mode="after")
    def _finite(self) -> Hyperparams:
        if not np.isfinite(self.T):
            raise ValueError("T must be finite.")
        return self
