"""Mean per-client UF1 of every strategy over several seeds.

Usage: python scripts/federated_comparison.py [--config configs/fed_compare.toml] [--seeds 0 1 2 3 4]
       [--out results/federated_comparison.json]
"""
import argparse
import json
from pathlib import Path

from fedpsyau import presets
from fedpsyau.studies import federated_comparison

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "fed_compare.toml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(presets.SEEDS))
    ap.add_argument("--out", default="results/federated_comparison.json")
    args = ap.parse_args()
    res = federated_comparison(args.config, args.seeds, log=lambda m: print(m, flush=True))
    for s, v in res["mean_uf1"].items():
        print(f"{s:>10}: mean client UF1 {v:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(res, indent=2) + "\n")


if __name__ == "__main__":
    main()
