from __future__ import annotations

import argparse
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from app import __version__
from app.core.config import default_seed, default_threads, get_logger, load_json_config
from app.core.errors import ConfigError
from app.core.models.chain_models import FitConfig, IntervalDefinition, RunManifest
from app.core.services.chain_engine import hyperparams_for, run_chains
from app.core.services.cohort_service import validate_cohort
from app.core.services.pipeline import load_cohort, widen_intervals
from app.core.storage import FIT_FILE, write_fit, write_manifest

logger = get_logger()


def parse_alpha(text: str) -> tuple[float, float]:
    """``"A,B"`` to (alpha_h, alpha_w)."""
    parts = [part.strip() for part in text.split(",")]
    try:
        values = tuple(float(part) for part in parts)
    except ValueError as exc:
        raise ConfigError(f"--alpha expects two numbers 'A,B', got '{text}'.") from exc
    if len(values) != 2:
        raise ConfigError(f"--alpha expects two numbers 'A,B', got '{text}'.")
    return values[0], values[1]


def resolve_fit_config(
    config_path: str | None,
    variant: str | None = None,
    intervals: str | None = None,
    alpha: str | None = None,
    seed: int | None = None,
    n_iter: int | None = None,
    burn_in: int | None = None,
    n_chains: int | None = None,
    thin: int | None = None,
    global_left: float | None = None,
) -> FitConfig:
    """Config file values with command-line overrides applied on top."""
    base = load_json_config(config_path, FitConfig).model_dump()
    chain: dict[str, Any] = base["chain"]
    overrides = {
        "model_variant": variant,
        "seed": seed,
        "n_iter": n_iter,
        "burn_in": burn_in,
        "n_chains": n_chains,
        "thin": thin,
    }
    chain.update({key: value for key, value in overrides.items() if value is not None})
    if alpha is not None:
        chain["alpha_h"], chain["alpha_w"] = parse_alpha(alpha)
    if chain.get("seed") is None:
        chain["seed"] = default_seed()
    if intervals is not None:
        base["intervals"] = intervals
    if global_left is not None:
        base["global_left"] = global_left
    try:
        return FitConfig.model_validate(base)
    except ValidationError as exc:
        raise ConfigError(f"Invalid fit configuration: {exc.errors()}") from exc


def cmd_fit(
    cohort_dir: str | Path,
    config_path: str | None,
    out_dir: str | Path,
    threads: int | None = None,
    **overrides: Any,
) -> int:
    """Load, optionally widen, validate, sample and write the fit file with its manifest."""
    config = resolve_fit_config(config_path, **overrides)
    loaded = load_cohort(cohort_dir)
    subjects = list(loaded.subjects)
    notes: list[str] = []
    if config.intervals == IntervalDefinition.WIDE:
        subjects = widen_intervals(subjects, config.global_left)
        notes.append(f"Wide intervals: every l_h set to {subjects[0].l_h:g}." if subjects else "Wide intervals.")

    hp = hyperparams_for(config, loaded.sidecar.T)
    cohort = validate_cohort(subjects, hp, loaded.covariate_names)
    notes.extend(cohort.warnings)

    draws = run_chains(cohort, config, loaded.sidecar.T, threads=threads or default_threads())
    draws.notes.extend(notes)

    root = Path(out_dir)
    fit_path = write_fit(draws, root / FIT_FILE)
    write_manifest(
        RunManifest(
            subcommand="fit",
            config_path=config_path,
            inputs=[str(Path(cohort_dir))],
            outputs=[fit_path.name],
            seed=config.chain.seed,
            chain_config=config.chain.model_dump(mode="json"),
            options={
                "intervals": config.intervals.value,
                "global_left": config.global_left,
                "splines": config.splines.model_dump(mode="json"),
                "priors": config.priors.model_dump(mode="json"),
            },
            notes=notes,
            tool_version=__version__,
        ),
        root,
    )
    logger.info("Wrote %d draws from %d chain(s) to %s.", draws.total, draws.n_chains, fit_path)
    return 0


def _handle(args: argparse.Namespace) -> int:
    return cmd_fit(
        args.cohort,
        args.config,
        args.out,
        threads=args.threads,
        variant=args.variant,
        intervals=args.intervals,
        alpha=args.alpha,
        seed=args.seed,
        n_iter=args.n_iter,
        burn_in=args.burn_in,
        n_chains=args.chains,
        thin=args.thin,
        global_left=args.global_left,
    )


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("fit", help="Run the Gibbs sampler on a cohort directory.")
    parser.add_argument("--cohort", required=True, help="Directory with subjects.csv, observations.csv, cohort.json.")
    parser.add_argument("--config", default=None, help="FitConfig JSON file.")
    parser.add_argument("--out", required=True, help="Output directory.")
    parser.add_argument("--variant", choices=["joint", "marginal"], default=None)
    parser.add_argument("--intervals", choices=["narrow", "wide"], default=None)
    parser.add_argument("--global-left", dest="global_left", type=float, default=None)
    parser.add_argument("--alpha", default=None, help="DP precisions as 'A,B' for H and W.")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--n-iter", dest="n_iter", type=int, default=None)
    parser.add_argument("--burn-in", dest="burn_in", type=int, default=None)
    parser.add_argument("--chains", type=int, default=None)
    parser.add_argument("--thin", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None, help="Parallel chain workers (default JM_THREADS).")
    parser.set_defaults(handler=_handle)
