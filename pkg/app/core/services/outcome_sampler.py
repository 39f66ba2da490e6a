from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from app.core.config import get_logger
from app.core.errors import SingularPrecisionError
from app.core.models.chain_models import PriorConfig
from app.core.models.cohort_models import LatentState, ValidatedCohort
from app.core.models.theta_models import ThetaState
from app.core.services.kernels import sample_inverse_gamma
from app.core.services.splines import SplineBases, eval_basis

logger = get_logger()

LOG_2PI: float = math.log(2.0 * math.pi)
FIXED_BLOCKS: tuple[str, ...] = ("beta_star", "beta1", "beta2", "alpha1", "alpha2")


def spline_block(responder: bool, z: int) -> str:
    """Fixed spline block used by a subject: beta* for responders, alpha* for nonresponders; 1 for z=1, 2 for z=0."""
    prefix = "beta" if responder else "alpha"
    return f"{prefix}{1 if z == 1 else 2}"


@dataclass(frozen=True, slots=True)
class FixedLayout:
    """Position of every fixed-effect block inside the stacked coefficient vector."""

    slices: dict[str, slice]
    penalized: dict[str, np.ndarray]

    @classmethod
    def build(cls, n_covariates: int, dim_b: int, dim_a: int, degree: int) -> FixedLayout:
        sizes = {
            "beta_star": n_covariates,
            "beta1": dim_b,
            "beta2": dim_b,
            "alpha1": dim_a,
            "alpha2": dim_a,
        }
        slices: dict[str, slice] = {}
        penalized: dict[str, np.ndarray] = {}
        start = 0
        for name in FIXED_BLOCKS:
            slices[name] = slice(start, start + sizes[name])
            mask = np.zeros(sizes[name], dtype=bool)
            if name != "beta_star":
                mask[degree + 1 :] = True
            penalized[name] = mask
            start += sizes[name]
        return cls(slices=slices, penalized=penalized)

    @property
    def size(self) -> int:
        return self.slices[FIXED_BLOCKS[-1]].stop


@dataclass(slots=True)
class SubjectDesign:
    block: str
    fixed_rows: np.ndarray
    individual_rows: np.ndarray
    v: float


class DesignCache:
    """Per-subject basis rows; responder rows follow the current v_i, nonresponder rows never change."""

    def __init__(self, cohort: ValidatedCohort, bases: SplineBases) -> None:
        self.cohort = cohort
        self.bases = bases
        self._designs: list[SubjectDesign | None] = [None] * cohort.size

    def __getitem__(self, i: int) -> SubjectDesign:
        design = self._designs[i]
        if design is None:
            raise KeyError(f"Design rows for subject index {i} were never built.")
        return design

    def build(self, i: int, v: float) -> SubjectDesign:
        cohort, bases = self.cohort, self.bases
        responder = bool(cohort.responder[i])
        if responder:
            scaled = (cohort.t[i] - v) / bases.time_scale
            fixed = eval_basis(bases.population_responder, scaled)
        else:
            scaled = cohort.t[i] / bases.time_scale
            fixed = eval_basis(bases.population_nonresponder, scaled)
        individual = eval_basis(bases.individual_basis(i, responder), scaled)
        return SubjectDesign(
            block=spline_block(responder, int(cohort.z[i])),
            fixed_rows=fixed.reshape(len(scaled), -1),
            individual_rows=individual.reshape(len(scaled), -1),
            v=float(v) if responder else math.nan,
        )

    def refresh(self, i: int, v: float) -> bool:
        """Rebuild subject ``i`` when its rows are stale; returns True when rows changed."""
        design = self._designs[i]
        if design is not None and (not self.cohort.responder[i] or design.v == v):
            return False
        self._designs[i] = self.build(i, v)
        return True

    def refresh_all(self, latent: LatentState) -> int:
        v = latent.v
        return sum(self.refresh(i, float(v[i])) for i in range(self.cohort.size))


class OutcomeSampler:
    """Gibbs block for the penalized-spline mixed model on the transformed outcome scale."""

    def __init__(self, cohort: ValidatedCohort, bases: SplineBases, priors: PriorConfig | None = None) -> None:
        self.cohort = cohort
        self.bases = bases
        self.priors = priors or PriorConfig()
        self.designs = DesignCache(cohort, bases)
        self.layout = FixedLayout.build(
            cohort.n_covariates,
            bases.population_responder.dimension,
            bases.population_nonresponder.dimension,
            bases.degree,
        )
        self.members: dict[str, np.ndarray] = {
            name: np.array(
                [i for i in range(cohort.size) if spline_block(bool(cohort.responder[i]), int(cohort.z[i])) == name],
                dtype=int,
            )
            for name in FIXED_BLOCKS[1:]
        }
        self.responders = np.flatnonzero(cohort.responder)
        self.nonresponders = np.flatnonzero(~cohort.responder)
        self.active = self._block_activity()
        self.last_rss: float = math.nan

    def _block_activity(self) -> dict[str, bool]:
        """A spline block is estimated only when its members span degree + 1 distinct visit times."""
        needed = self.bases.degree + 1
        active = {"beta_star": True}
        for name, members in self.members.items():
            distinct = np.unique(np.concatenate([self.cohort.t[i] for i in members])).size if members.size else 0
            active[name] = distinct >= needed
            if members.size and not active[name]:
                logger.warning(
                    "Holding spline block %s at zero: %d subject(s) give %d distinct time(s), need %d.",
                    name,
                    members.size,
                    distinct,
                    needed,
                )
        return active

    def initial_theta(self) -> ThetaState:
        return ThetaState.initial(
            n_subjects=self.cohort.size,
            n_covariates=self.cohort.n_covariates,
            dim_b=self.bases.population_responder.dimension,
            dim_a=self.bases.population_nonresponder.dimension,
            dim_phi=self.bases.dim_phi,
            dim_psi=self.bases.dim_psi,
            degree=self.bases.degree,
            variance=self.priors.initial_variance,
        )

    def is_active(self, block: str) -> bool:
        return self.active[block]

    def depends_on_w(self, i: int) -> bool:
        return bool(self.cohort.responder[i])

    def refresh(self, i: int, latent: LatentState) -> None:
        self.designs.refresh(i, float(latent.h[i] + latent.w[i]))

    def refresh_all(self, latent: LatentState) -> None:
        self.designs.refresh_all(latent)

    def _individual(self, theta: ThetaState, i: int) -> np.ndarray:
        return theta.b[i] if self.cohort.responder[i] else theta.a[i]

    def subject_mean(self, i: int, theta: ThetaState) -> np.ndarray:
        design = self.designs[i]
        coefficients = getattr(theta, design.block)
        return (
            design.fixed_rows @ coefficients
            + design.individual_rows @ self._individual(theta, i)
            + float(self.cohort.x_star[i] @ theta.beta_star)
        )

    def loglik_subject(self, i: int, w_values: np.ndarray | float, h: float, theta: ThetaState) -> np.ndarray | float:
        """log p(y_i | w) for every candidate w, holding h_i and the current random coefficients."""
        cohort = self.cohort
        w = np.asarray(w_values, dtype=float)
        y = cohort.y[i]
        offset = float(cohort.x_star[i] @ theta.beta_star)

        if cohort.responder[i]:
            scaled = (cohort.t[i][None, :] - (h + w.reshape(-1, 1))) / self.bases.time_scale
            fixed = eval_basis(self.bases.population_responder, scaled)
            block = spline_block(True, int(cohort.z[i]))
            individual = eval_basis(self.bases.individual_responder, scaled)
            means = fixed @ getattr(theta, block) + individual @ theta.b[i] + offset
            sq = np.sum((y[None, :] - means) ** 2, axis=1)
            values = -0.5 * (y.size * (LOG_2PI + math.log(theta.sigma2)) + sq / theta.sigma2)
            values = values.reshape(w.shape)
        else:
            residual = y - self.subject_mean(i, theta)
            constant = -0.5 * (y.size * (LOG_2PI + math.log(theta.sigma2)) + float(residual @ residual) / theta.sigma2)
            values = np.full(w.shape, constant)
        return float(values) if values.ndim == 0 else values

    def subject_logliks(self, theta: ThetaState) -> np.ndarray:
        out = np.empty(self.cohort.size)
        for i in range(self.cohort.size):
            residual = self.cohort.y[i] - self.subject_mean(i, theta)
            out[i] = -0.5 * (residual.size * (LOG_2PI + math.log(theta.sigma2)) + float(residual @ residual) / theta.sigma2)
        return out

    def residual_sum_of_squares(self, theta: ThetaState) -> float:
        total = 0.0
        for i in range(self.cohort.size):
            residual = self.cohort.y[i] - self.subject_mean(i, theta)
            total += float(residual @ residual)
        return total

    def _prior_precision(self, theta: ThetaState) -> np.ndarray:
        diagonal = np.zeros(self.layout.size)
        for name in FIXED_BLOCKS[1:]:
            variance = getattr(theta, f"s2_{name}")
            block = diagonal[self.layout.slices[name]]
            block[self.layout.penalized[name]] = 1.0 / variance
        return diagonal

    def _singular_block(self, precision: np.ndarray, active: list[str]) -> str:
        for name in active:
            cells = np.arange(self.layout.size)[self.layout.slices[name]]
            try:
                linalg.cholesky(precision[np.ix_(cells, cells)], lower=True)
            except linalg.LinAlgError:
                return name
        return "+".join(active)

    def update_fixed_effects(self, theta: ThetaState, rng: np.random.Generator) -> ThetaState:
        """Joint GLS draw of (beta*, beta1, beta2, alpha1, alpha2); inactive blocks stay at zero."""
        cohort, layout = self.cohort, self.layout
        size = layout.size
        gram = np.zeros((size, size))
        score = np.zeros(size)
        covariate_cells = np.arange(size)[layout.slices["beta_star"]]

        for i in range(cohort.size):
            design = self.designs[i]
            if not self.is_active(design.block):
                continue
            target = cohort.y[i] - design.individual_rows @ self._individual(theta, i)
            n_i = target.size
            cells = np.concatenate((covariate_cells, np.arange(size)[layout.slices[design.block]]))
            rows = np.hstack((np.broadcast_to(cohort.x_star[i], (n_i, cohort.n_covariates)), design.fixed_rows))
            gram[np.ix_(cells, cells)] += rows.T @ rows
            score[cells] += rows.T @ target

        active = [name for name in FIXED_BLOCKS if self.is_active(name)]
        keep = np.concatenate([np.arange(size)[layout.slices[name]] for name in active])
        precision = gram[np.ix_(keep, keep)] / theta.sigma2 + np.diag(self._prior_precision(theta)[keep])

        try:
            lower = linalg.cholesky(precision, lower=True)
        except linalg.LinAlgError as exc:
            full = np.zeros((size, size))
            full[np.ix_(keep, keep)] = precision
            raise SingularPrecisionError(self._singular_block(full, active)) from exc

        mean = linalg.cho_solve((lower, True), score[keep] / theta.sigma2)
        draw = mean + linalg.solve_triangular(lower.T, rng.standard_normal(keep.size), lower=False)

        stacked = np.zeros(size)
        stacked[keep] = draw
        for name in FIXED_BLOCKS:
            setattr(theta, name, stacked[layout.slices[name]].copy())
        return theta

    def update_random_effects(self, i: int, theta: ThetaState, rng: np.random.Generator) -> ThetaState:
        cohort = self.cohort
        design = self.designs[i]
        responder = bool(cohort.responder[i])
        residual = (
            cohort.y[i]
            - design.fixed_rows @ getattr(theta, design.block)
            - float(cohort.x_star[i] @ theta.beta_star)
        )
        rows = design.individual_rows
        poly = theta.s2_b_poly if responder else theta.s2_a_poly
        knot = theta.s2_b if responder else theta.s2_a
        prior = np.full(rows.shape[1], 1.0 / knot)
        prior[: poly.size] = 1.0 / poly

        precision = rows.T @ rows / theta.sigma2 + np.diag(prior)
        lower = linalg.cholesky(precision, lower=True)
        mean = linalg.cho_solve((lower, True), rows.T @ residual / theta.sigma2)
        draw = mean + linalg.solve_triangular(lower.T, rng.standard_normal(rows.shape[1]), lower=False)
        if responder:
            theta.b[i] = draw
        else:
            theta.a[i] = draw
        return theta

    def _variance_draw(self, values: np.ndarray, rng: np.random.Generator) -> float:
        values = np.asarray(values, dtype=float).ravel()
        shape = self.priors.gamma_shape + 0.5 * values.size
        scale = self.priors.gamma_rate + 0.5 * float(values @ values)
        return sample_inverse_gamma(shape, scale, rng)

    def update_variances(self, theta: ThetaState, rng: np.random.Generator) -> ThetaState:
        """Inverse-gamma draws for sigma2, the smoothing variances and the random-effect variances."""
        degree = self.bases.degree
        self.last_rss = self.residual_sum_of_squares(theta)
        theta.sigma2 = sample_inverse_gamma(
            self.priors.gamma_shape + 0.5 * self.cohort.n_observations,
            self.priors.gamma_rate + 0.5 * self.last_rss,
            rng,
        )

        for name in FIXED_BLOCKS[1:]:
            coefficients = getattr(theta, name)
            governed = coefficients[self.layout.penalized[name]] if self.is_active(name) else coefficients[:0]
            setattr(theta, f"s2_{name}", self._variance_draw(governed, rng))

        b = theta.b[self.responders]
        theta.s2_b = self._variance_draw(b[:, degree + 1 :], rng)
        theta.s2_b_poly = np.array([self._variance_draw(b[:, s], rng) for s in range(degree + 1)])

        a = theta.a[self.nonresponders]
        theta.s2_a = self._variance_draw(a[:, degree + 1 :], rng)
        theta.s2_a_poly = np.array([self._variance_draw(a[:, s], rng) for s in range(degree + 1)])
        return theta

    def update(self, theta: ThetaState, latent: LatentState, rng: np.random.Generator) -> ThetaState:
        """Full outcome block: fixed effects, then every random effect, then variances."""
        self.refresh_all(latent)
        self.update_fixed_effects(theta, rng)
        for i in range(self.cohort.size):
            self.update_random_effects(i, theta, rng)
        self.update_variances(theta, rng)
        theta.assert_positive()
        return theta
