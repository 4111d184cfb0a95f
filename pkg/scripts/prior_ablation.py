"""Prior ablation on the synthetic task: both / psych / data / none.

Usage: python scripts/prior_ablation.py [--seeds 0 1 2 3 4] [--epochs 10] [--out results/prior_ablation.json]
"""
import argparse
import json
from pathlib import Path

from fedpsyau import presets
from fedpsyau.studies import prior_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=list(presets.SEEDS))
    ap.add_argument("--epochs", type=int, default=presets.ABLATION_EPOCHS)
    ap.add_argument("--out", default="results/prior_ablation.json")
    args = ap.parse_args()
    res = prior_ablation(args.seeds, args.epochs, log=lambda m: print(m, flush=True))
    for m, v in res["mean_uf1"].items():
        print(f"{m:>5}: mean UF1 {v:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res, indent=2) + "\n")


if __name__ == "__main__":
    main()
