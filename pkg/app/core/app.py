from __future__ import annotations

import argparse
from types import ModuleType
from typing import Sequence

from app import __version__
from app.core.commands import diagnose, fit, simulate, summarize
from app.core.config import get_logger, load_environment
from app.core.errors import JointModelError

logger = get_logger()


class JointModelApp:
    """Command-line application; each command module registers itself like a blueprint."""

    def __init__(self, prog: str = "jointmodel") -> None:
        self.parser = argparse.ArgumentParser(
            prog=prog,
            description="Joint event-time and longitudinal-outcome sampler.",
        )
        self.parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
        self.subparsers = self.parser.add_subparsers(dest="command", required=True)
        self.commands: list[str] = []

    def register_command(self, module: ModuleType) -> None:
        module.register(self.subparsers)
        self.commands.append(module.__name__.rsplit(".", 1)[-1])

    def run(self, argv: Sequence[str] | None = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code) if isinstance(exc.code, int) else 2

        try:
            return int(args.handler(args))
        except JointModelError as exc:
            logger.error("%s failed: %s", args.command, exc.detail)
            return exc.exit_code
        except Exception:
            logger.exception("%s failed unexpectedly.", args.command)
            return 1


def create_app() -> JointModelApp:
    load_environment()
    app = JointModelApp()

    app.register_command(simulate)
    app.register_command(fit)
    app.register_command(summarize)
    app.register_command(diagnose)

    return app
