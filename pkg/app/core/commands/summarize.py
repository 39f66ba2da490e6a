from __future__ import annotations

import argparse
from pathlib import Path
from typing import Sequence

from app import __version__
from app.core.config import get_logger
from app.core.models.chain_models import RunManifest
from app.core.services.summaries import build_report
from app.core.storage import read_fit, write_json, write_manifest

logger = get_logger()

REPORT_FILE = "report.json"


def cmd_summarize(
    fit_file: str | Path,
    out_dir: str | Path,
    grid_step: float = 30.0,
    n_grid: int = 101,
    pooled_percentiles: bool = False,
    subjects: Sequence[str] | None = None,
) -> int:
    """Report JSON plus one CSV per table or figure, recomputed from the stored draws only."""
    draws = read_fit(fit_file)
    report, figures = build_report(
        draws,
        grid_step=grid_step,
        n_grid=n_grid,
        pooled_percentiles=pooled_percentiles,
        predictive_subjects=subjects,
    )

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_json(report.model_dump(mode="json"), root / REPORT_FILE)
    for name, frame in figures.items():
        frame.to_csv(root / name, index=False, float_format="%.17g")

    write_manifest(
        RunManifest(
            subcommand="summarize",
            inputs=[str(Path(fit_file))],
            outputs=[REPORT_FILE, *sorted(figures)],
            seed=draws.seed,
            chain_config=draws.config.get("chain"),
            options={
                "grid_step": grid_step,
                "n_grid": n_grid,
                "pooled_percentiles": pooled_percentiles,
                "subjects": list(subjects) if subjects is not None else None,
            },
            notes=report.notes,
            tool_version=__version__,
        ),
        root,
    )
    logger.info("Wrote report and %d figure table(s) to %s.", len(figures), root)
    return 0


def _handle(args: argparse.Namespace) -> int:
    return cmd_summarize(
        args.fit,
        args.out,
        grid_step=args.grid_step,
        n_grid=args.n_grid,
        pooled_percentiles=args.pooled_percentiles,
        subjects=args.subjects,
    )


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("summarize", help="Compute the posterior summaries of a fit file.")
    parser.add_argument("--fit", required=True, help="Fit-result file written by 'fit'.")
    parser.add_argument("--out", required=True, help="Output directory.")
    parser.add_argument("--grid-step", dest="grid_step", type=float, default=30.0, help="Hazard cell width in days.")
    parser.add_argument("--n-grid", dest="n_grid", type=int, default=101, help="Points per population curve.")
    parser.add_argument("--pooled-percentiles", dest="pooled_percentiles", action="store_true")
    parser.add_argument("--subjects", nargs="*", default=None, help="Subject ids for predictive curves.")
    parser.set_defaults(handler=_handle)
