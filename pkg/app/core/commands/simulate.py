from __future__ import annotations

import argparse
from pathlib import Path

from app import __version__
from app.core.config import get_logger, load_json_config
from app.core.models.chain_models import RunManifest
from app.core.models.generator_models import GeneratorConfig
from app.core.services.generator import generate_cohort, write_truth
from app.core.services.pipeline import write_cohort
from app.core.storage import write_manifest

logger = get_logger()

TRUTH_FILE = "truth.json"


def cmd_simulate(config_path: str | None, out_dir: str | Path, seed: int | None = None) -> int:
    """Generate a synthetic cohort plus its ground truth into ``out_dir``."""
    config = load_json_config(config_path, GeneratorConfig)
    if seed is not None:
        config = GeneratorConfig.model_validate({**config.model_dump(), "seed": seed})

    generated = generate_cohort(config)
    root = Path(out_dir)
    outputs = write_cohort(generated.cohort, root)
    outputs.append(write_truth(generated.truth, root / TRUTH_FILE))

    write_manifest(
        RunManifest(
            subcommand="simulate",
            config_path=config_path,
            outputs=sorted(path.name for path in outputs),
            seed=config.seed,
            generator_config=config.model_dump(mode="json"),
            tool_version=__version__,
        ),
        root,
    )
    logger.info("Wrote synthetic cohort of %d subjects to %s.", len(generated.cohort.subjects), root)
    return 0


def _handle(args: argparse.Namespace) -> int:
    return cmd_simulate(args.config, args.out, seed=args.seed)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("simulate", help="Generate a synthetic cohort with ground truth.")
    parser.add_argument("--config", default=None, help="GeneratorConfig JSON file.")
    parser.add_argument("--out", required=True, help="Output directory.")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
    parser.set_defaults(handler=_handle)
