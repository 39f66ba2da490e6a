from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

# Add project root to path so we can import app
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.core.app import create_app


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Simulate, fit, summarize and diagnose a small cohort end to end.")
    parser.add_argument("--workdir", default="runs/smoke")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--n-iter", dest="n_iter", type=int, default=400)
    parser.add_argument("--burn-in", dest="burn_in", type=int, default=200)
    parser.add_argument("--chains", type=int, default=2)
    parser.add_argument("--variant", choices=["joint", "marginal"], default="joint")
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    root = Path(args.workdir)
    app = create_app()

    steps = [
        ["simulate", "--out", str(root / "cohort"), "--seed", str(args.seed)],
        [
            "fit",
            "--cohort", str(root / "cohort"),
            "--out", str(root / "fit"),
            "--variant", args.variant,
            "--seed", str(args.seed),
            "--n-iter", str(args.n_iter),
            "--burn-in", str(args.burn_in),
            "--chains", str(args.chains),
        ],
        ["summarize", "--fit", str(root / "fit" / "fit.jmfit"), "--out", str(root / "summary")],
        ["diagnose", "--fit", str(root / "fit" / "fit.jmfit"), "--out", str(root / "diag")],
    ]
    for argv in steps:
        print(f"[smoke] {' '.join(argv)}")
        status = app.run(argv)
        if status != 0:
            print(f"[smoke] {argv[0]} exited with {status}")
            return status

    report = json.loads((root / "summary" / "report.json").read_text(encoding="utf-8"))
    for row in report["percentiles"]:
        print(f"[smoke] W percentile {row['level']:g}: z1={row['z1']} z0={row['z0']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
