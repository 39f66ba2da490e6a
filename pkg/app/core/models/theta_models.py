from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

SMOOTHING_LABELS: tuple[str, ...] = ("beta1", "beta2", "alpha1", "alpha2", "b", "a")


@dataclass(slots=True)
class ThetaState:
    """Outcome-model parameters; every variance is a variance, never a precision."""

    beta_star: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    b: np.ndarray
    a: np.ndarray
    sigma2: float
    s2_beta1: float
    s2_beta2: float
    s2_alpha1: float
    s2_alpha2: float
    s2_b: float
    s2_a: float
    s2_b_poly: np.ndarray
    s2_a_poly: np.ndarray

    @classmethod
    def initial(
        cls,
        n_subjects: int,
        n_covariates: int,
        dim_b: int,
        dim_a: int,
        dim_phi: int,
        dim_psi: int,
        degree: int,
        variance: float = 1.0,
    ) -> ThetaState:
        return cls(
            beta_star=np.zeros(n_covariates),
            beta1=np.zeros(dim_b),
            beta2=np.zeros(dim_b),
            alpha1=np.zeros(dim_a),
            alpha2=np.zeros(dim_a),
            b=np.zeros((n_subjects, dim_phi)),
            a=np.zeros((n_subjects, dim_psi)),
            sigma2=variance,
            s2_beta1=variance,
            s2_beta2=variance,
            s2_alpha1=variance,
            s2_alpha2=variance,
            s2_b=variance,
            s2_a=variance,
            s2_b_poly=np.full(degree + 1, variance),
            s2_a_poly=np.full(degree + 1, variance),
        )

    def smoothing_vector(self) -> np.ndarray:
        return np.array(
            [self.s2_beta1, self.s2_beta2, self.s2_alpha1, self.s2_alpha2, self.s2_b, self.s2_a],
            dtype=float,
        )

    def variances(self) -> np.ndarray:
        return np.concatenate(([self.sigma2], self.smoothing_vector(), self.s2_b_poly, self.s2_a_poly))

    def assert_positive(self) -> None:
        values = self.variances()
        if not np.all(values > 0) or not np.all(np.isfinite(values)):
            raise ValueError(f"Variance parameters must be positive and finite, got {values}.")

    def copy(self) -> ThetaState:
        copied = {}
        for item in fields(self):
            value = getattr(self, item.name)
            copied[item.name] = value.copy() if isinstance(value, np.ndarray) else value
        return ThetaState(**copied)
