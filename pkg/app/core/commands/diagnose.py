from __future__ import annotations

import argparse
from pathlib import Path
from typing import Sequence

from app import __version__
from app.core.config import get_logger
from app.core.models.chain_models import RunManifest
from app.core.services.diagnostics import MIN_CHAINS, MIN_DRAWS, convergence_frame, gelman_rubin, trace_export
from app.core.storage import read_fit, write_manifest

logger = get_logger()

RHAT_FILE = "rhat.csv"
TRACE_FILE = "traces.csv"


def cmd_diagnose(fit_file: str | Path, out_dir: str | Path, parameters: Sequence[str] | None = None) -> int:
    """Trace CSV for the monitored parameters and, with enough chains, the R-hat/ESS table."""
    draws = read_fit(fit_file)
    names = list(parameters) if parameters else draws.scalar_names()
    root = Path(out_dir)
    outputs = [trace_export(draws, names, root / TRACE_FILE).name]
    notes: list[str] = []

    if draws.n_chains < MIN_CHAINS:
        notes.append(f"R-hat skipped: {draws.n_chains} chain(s), need {MIN_CHAINS}.")
    elif draws.n_draws < MIN_DRAWS:
        notes.append(f"R-hat skipped: {draws.n_draws} draws per chain, need {MIN_DRAWS}.")
    else:
        results = gelman_rubin(draws, names)
        convergence_frame(results).to_csv(root / RHAT_FILE, index=False, float_format="%.17g")
        outputs.append(RHAT_FILE)
        worst = max(results, key=lambda item: item.rhat, default=None)
        if worst is not None:
            logger.info("Largest R-hat %.4f for %s.", worst.rhat, worst.parameter)
    for note in notes:
        logger.info(note)

    write_manifest(
        RunManifest(
            subcommand="diagnose",
            inputs=[str(Path(fit_file))],
            outputs=outputs,
            seed=draws.seed,
            chain_config=draws.config.get("chain"),
            options={"parameters": names},
            notes=notes,
            tool_version=__version__,
        ),
        root,
    )
    return 0


def _handle(args: argparse.Namespace) -> int:
    return cmd_diagnose(args.fit, args.out, parameters=args.parameters)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("diagnose", help="Trace export and convergence diagnostics of a fit file.")
    parser.add_argument("--fit", required=True, help="Fit-result file written by 'fit'.")
    parser.add_argument("--out", required=True, help="Output directory.")
    parser.add_argument("--parameters", nargs="*", default=None, help="Selectors such as sigma2 or lambda_w.mu1.")
    parser.set_defaults(handler=_handle)
