"""Single-client learnability check against the calibrated UF1 threshold.

Usage: python scripts/learnability.py [--max-epochs 50] [--out results/learnability.json]
"""
import argparse
import json
from pathlib import Path

from fedpsyau.studies import learnability

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--max-epochs", type=int, default=50)
    ap.add_argument("--out", default="results/learnability.json")
    args = ap.parse_args()
    threshold = json.loads((ROOT / "calibration" / "learnability.json").read_text())["threshold"]
    res = learnability(threshold, max_epochs=args.max_epochs, log=lambda m: print(m, flush=True))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res, indent=2) + "\n")


if __name__ == "__main__":
    main()
