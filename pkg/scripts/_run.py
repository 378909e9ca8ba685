"""Shared driver: write a benchmark's documents and optimize it through the CLI."""
import argparse
import json
import sys
from pathlib import Path

from shellopt.cli import main


def run(name):
    ap = argparse.ArgumentParser(description=f"optimize the {name} benchmark")
    ap.add_argument("--out", type=Path, default=Path("out") / name)
    ap.add_argument("--check-gradients", action="store_true", help="also write the gradient report")
    args = ap.parse_args()
    docs = args.out / "inputs"
    main(["generate-benchmarks", "--out", str(docs)])
    inputs = [str(docs / f"{name}.geometry.json"), str(docs / f"{name}.problem.json"), "--out", str(args.out)]
    if args.check_gradients:
        code = main(["check-gradients", *inputs])
        if code:
            sys.exit(code)
    code = main(["optimize", *inputs, "--optimizer-log-every", "5"])
    print(json.dumps(json.loads((args.out / "summary.json").read_text()), indent=2))
    sys.exit(code)
