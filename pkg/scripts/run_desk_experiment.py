"""End-to-end desk-scale reproduction: corpora -> tracker -> single / MTL / TL policies -> tables.

Every stage is skipped when its artifact already exists, so an interrupted run resumes where it
stopped. Equivalent to running the `mdrl` subcommands one after another.

    python scripts/run_desk_experiment.py [--config configs/desk.toml] [--out runs/desk]
"""

import argparse
import sys
from pathlib import Path

from mdrl.cli import EXIT_OK, main as mdrl

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.toml")
    ap.add_argument("--out", type=Path, default=ROOT / "runs" / "desk")
    ap.add_argument("--seed", type=int, default=0, help="corpus / tracker seed")
    args = ap.parse_args()
    common = ["--config", str(args.config), "--out", str(args.out), "--seed", str(args.seed), "-v"]

    stages = []
    if not (args.out / "corpora").exists():
        stages.append(["gen-corpus"])
    if not (args.out / "dst.ckpt").exists():
        stages += [["train-dst"], ["eval-dst"]]
    stages += [["train", "--mode", "all"]]
    for stage in stages:
        print(f"== mdrl {' '.join(stage)}", flush=True)
        code = mdrl(common + stage)
        if code != EXIT_OK:
            return code
    print(f"tables: {args.out / 'report.txt'} and {args.out / 'report.csv'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
