from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from app.core.errors import InsufficientDrawsError
from app.core.models.chain_models import ModelVariant
from app.core.models.cohort_models import LAMBDA_LABELS, ValidatedCohort
from app.core.models.theta_models import SMOOTHING_LABELS
from app.core.services.splines import SplineBases

LATENT_COLUMNS: tuple[str, ...] = ("h", "w", "lambda_h", "lambda_w", "accept_w")
THETA_COLUMNS: tuple[str, ...] = (
    "beta_star",
    "beta1",
    "beta2",
    "alpha1",
    "alpha2",
    "b",
    "a",
    "sigma2",
    "smoothing",
    "s2_b_poly",
    "s2_a_poly",
    "loglik",
)
LABELLED: dict[str, tuple[str, ...]] = {
    "lambda_h": LAMBDA_LABELS,
    "lambda_w": LAMBDA_LABELS,
    "smoothing": SMOOTHING_LABELS,
}

_SELECTOR = re.compile(r"^(?P<name>[A-Za-z_][A-Za-z0-9_]*)(?:\.(?P<label>[A-Za-z0-9_]+)|\[(?P<index>[0-9, ]+)\])?$")


@dataclass(frozen=True, slots=True)
class CohortSnapshot:
    """The cohort facts summaries need, detached from the raw subject records."""

    ids: tuple[str, ...]
    covariate_names: tuple[str, ...]
    z: np.ndarray
    responder: np.ndarray
    x_star: np.ndarray
    t: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    T: float

    @classmethod
    def from_cohort(cls, cohort: ValidatedCohort, T: float) -> CohortSnapshot:
        return cls(
            ids=cohort.ids,
            covariate_names=cohort.covariate_names,
            z=cohort.z.copy(),
            responder=cohort.responder.copy(),
            x_star=cohort.x_star.copy(),
            t=tuple(times.copy() for times in cohort.t),
            y=tuple(values.copy() for values in cohort.y),
            T=float(T),
        )

    @property
    def size(self) -> int:
        return len(self.ids)

    def index_of(self, subject_id: str) -> int:
        try:
            return self.ids.index(subject_id)
        except ValueError as exc:
            raise KeyError(f"Subject '{subject_id}' is not part of the fit.") from exc

    def to_payload(self) -> dict[str, Any]:
        return {
            "ids": list(self.ids),
            "covariate_names": list(self.covariate_names),
            "z": [int(value) for value in self.z],
            "responder": [bool(value) for value in self.responder],
            "x_star": self.x_star.tolist(),
            "t": [times.tolist() for times in self.t],
            "y": [values.tolist() for values in self.y],
            "T": self.T,
        }

    @classmethod
    def from_payload(cls, payload: dict[str, Any]) -> CohortSnapshot:
        names = tuple(payload["covariate_names"])
        return cls(
            ids=tuple(payload["ids"]),
            covariate_names=names,
            z=np.asarray(payload["z"], dtype=int),
            responder=np.asarray(payload["responder"], dtype=bool),
            x_star=np.asarray(payload["x_star"], dtype=float).reshape(len(payload["ids"]), len(names)),
            t=tuple(np.asarray(times, dtype=float) for times in payload["t"]),
            y=tuple(np.asarray(values, dtype=float) for values in payload["y"]),
            T=float(payload["T"]),
        )


@dataclass(slots=True)
class PosteriorDraws:
    """Retained draws; every column is shaped (n_chains, n_draws, *parameter_shape)."""

    columns: dict[str, np.ndarray]
    variant: ModelVariant
    bases: SplineBases
    cohort: CohortSnapshot
    seed: int
    config: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return int(self.columns["h"].shape[0])

    @property
    def n_draws(self) -> int:
        return int(self.columns["h"].shape[1])

    @property
    def total(self) -> int:
        return self.n_chains * self.n_draws

    @property
    def has_theta(self) -> bool:
        return "beta_star" in self.columns

    def require(self, minimum: int = 1) -> None:
        if self.total < minimum:
            raise InsufficientDrawsError(f"insufficient draws: have {self.total}, need at least {minimum}.")

    def pooled(self, name: str) -> np.ndarray:
        """Column with chains stacked, shape (n_chains * n_draws, *parameter_shape)."""
        if name not in self.columns:
            raise KeyError(f"Column '{name}' is not stored in this fit.")
        values = self.columns[name]
        return values.reshape((-1,) + values.shape[2:])

    def series(self, selector: str) -> np.ndarray:
        """Scalar trace (n_chains, n_draws) for names like ``sigma2``, ``lambda_h.mu1``, ``b[3,0]``."""
        match = _SELECTOR.match(selector.strip())
        if match is None:
            raise KeyError(f"Cannot parse parameter selector '{selector}'.")
        name = match.group("name")
        if name not in self.columns:
            raise KeyError(f"Column '{name}' is not stored in this fit.")
        values = self.columns[name]

        if match.group("label") is not None:
            labels = LABELLED.get(name, ())
            if match.group("label") not in labels:
                raise KeyError(f"Column '{name}' has no component '{match.group('label')}'.")
            return values[:, :, labels.index(match.group("label"))]
        if match.group("index") is not None:
            index = tuple(int(part) for part in match.group("index").split(","))
            return values[(slice(None), slice(None)) + index]
        if values.ndim != 2:
            raise KeyError(f"Column '{name}' is not scalar; select a component.")
        return values

    def scalar_names(self) -> list[str]:
        """Default monitored parameters: base measures and every low-dimensional theta component."""
        names = [f"{column}.{label}" for column in ("lambda_h", "lambda_w") for label in LAMBDA_LABELS]
        if not self.has_theta:
            return names
        names.append("sigma2")
        names.extend(f"smoothing.{label}" for label in SMOOTHING_LABELS)
        for column in ("beta_star", "beta1", "beta2", "alpha1", "alpha2"):
            names.extend(f"{column}[{k}]" for k in range(self.columns[column].shape[2]))
        return names

    @classmethod
    def concatenate(cls, parts: list[PosteriorDraws]) -> PosteriorDraws:
        if not parts:
            raise InsufficientDrawsError("insufficient draws: no chains to combine.")
        first = parts[0]
        columns = {name: np.concatenate([part.columns[name] for part in parts], axis=0) for name in first.columns}
        notes = [note for part in parts for note in part.notes]
        return cls(
            columns=columns,
            variant=first.variant,
            bases=first.bases,
            cohort=first.cohort,
            seed=first.seed,
            config=first.config,
            notes=notes,
        )
