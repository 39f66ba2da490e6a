from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import arviz as az
import numpy as np
import pandas as pd

from app.core.errors import InsufficientDrawsError
from app.core.models.draws_models import PosteriorDraws

MIN_CHAINS: int = 2
MIN_DRAWS: int = 10


@dataclass(frozen=True, slots=True)
class Convergence:
    parameter: str
    rhat: float
    ess: float
    flagged: bool


def split_rhat(chains: np.ndarray) -> tuple[float, bool]:
    """Potential scale reduction on split chains of shape (n_chains, n_draws); (1, True) when nothing varies."""
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < MIN_CHAINS or chains.shape[1] < MIN_DRAWS:
        raise InsufficientDrawsError(
            f"R-hat needs at least {MIN_CHAINS} chains of {MIN_DRAWS} draws, got shape {chains.shape}."
        )
    half = chains.shape[1] // 2
    halves = np.concatenate((chains[:, :half], chains[:, -half:]), axis=0)
    if float(np.mean(np.var(halves, axis=1, ddof=1))) <= 0.0:
        between = float(np.var(np.mean(halves, axis=1)))
        return (1.0, True) if between <= 0.0 else (math.inf, True)
    return max(1.0, float(az.rhat(chains, method="split"))), False


def effective_sample_size(chains: np.ndarray) -> float:
    """Mean ESS over split chains; nan when every draw is identical."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    n_draws = chains.shape[1]
    if n_draws < 4:
        raise InsufficientDrawsError(f"ESS needs at least 4 draws per chain, got {n_draws}.")
    if float(np.ptp(chains)) == 0.0:
        return math.nan
    return float(az.ess(chains, method="mean"))


def gelman_rubin(draws: PosteriorDraws, parameters: Sequence[str] | None = None) -> list[Convergence]:
    names = list(parameters) if parameters is not None else draws.scalar_names()
    results: list[Convergence] = []
    for name in names:
        series = draws.series(name)
        rhat, flagged = split_rhat(series)
        ess = effective_sample_size(series)
        results.append(Convergence(parameter=name, rhat=rhat, ess=ess, flagged=flagged or math.isnan(ess)))
    return results


def convergence_frame(results: Sequence[Convergence]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "parameter": [item.parameter for item in results],
            "rhat": [item.rhat for item in results],
            "ess": [item.ess for item in results],
            "flagged": [item.flagged for item in results],
        },
        columns=["parameter", "rhat", "ess", "flagged"],
    )


def trace_frame(draws: PosteriorDraws, parameters: Sequence[str]) -> pd.DataFrame:
    chain_index = np.repeat(np.arange(draws.n_chains), draws.n_draws)
    iteration = np.tile(np.arange(draws.n_draws), draws.n_chains)
    frame = pd.DataFrame({"chain": chain_index, "iter": iteration})
    for name in parameters:
        frame[name] = draws.series(name).reshape(-1)
    return frame


def trace_export(draws: PosteriorDraws, parameters: Sequence[str], path: str | Path) -> Path:
    """One row per retained iteration per chain; columns chain, iter, then the selected parameters."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    frame = trace_frame(draws, parameters) if parameters else pd.DataFrame(columns=["chain", "iter"])
    frame.to_csv(target, index=False, float_format="%.17g")
    return target
