"""Command-line entry point.

Subcommands::

    run              train every strategy in the config and write artifacts
    generate         write one dataset file per client
    inspect          dump a dataset or parameter file as JSON
    list-strategies  print the available aggregation strategies

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError
from .federated import STRATEGIES
from .params import PARAM_MAGIC, deserialize
from .synth import Dataset, dump_json


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(
        seed=args.seed,
        out_dir=args.out_dir,
        rounds=getattr(args, "rounds", None),
        clients=getattr(args, "clients", None),
        strategies=getattr(args, "strategy", None),
    )


def cmd_list(args) -> int:
    for s in STRATEGIES:
        print(s)
    return 0


def cmd_run(args) -> int:
    if args.list_strategies:
        return cmd_list(args)
    from .experiment import run_experiment

    cfg = _load(args)
    summary = run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
    for name, block in summary["strategies"].items():
        print(f"{name:>10}  UF1 {block['mean_client_uf1']:.4f}  UAR {block['mean_client_uar']:.4f}")
    print(f"artifacts written to {cfg.out_dir}")
    return 0


def cmd_generate(args) -> int:
    from .experiment import client_data

    cfg = _load(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for cid, part in enumerate(client_data(cfg)):
        path = out / f"client_{cid}.fpds"
        part.save(path)
        print(f"{path}: {len(part)} samples, {len(np.unique(part.subject))} subjects")
    return 0


def cmd_inspect(args) -> int:
    blob = Path(args.path).read_bytes()
    if blob[:4] == PARAM_MAGIC:
        ps = deserialize(blob)
        rows = {name: {"shape": list(a.shape), "norm": float(np.linalg.norm(a))} for name, a in ps.items()}
        print(json.dumps(rows, indent=1))
    else:
        print(dump_json(Dataset.load(args.path), limit=args.limit))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpsyau", description="Federated AU-graph micro-expression experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fed=True):
        sp.add_argument("--config", help="experiment TOML file")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--out-dir", help="output directory override")
        sp.add_argument("--clients", type=int, help="client count override")
        if fed:
            sp.add_argument("--strategy", action="append", choices=STRATEGIES,
                            help="strategy to run (repeatable); defaults to the config list")
            sp.add_argument("--rounds", type=int, help="round count override")

    run = sub.add_parser("run", help="run an experiment")
    common(run)
    run.add_argument("--list-strategies", action="store_true", help="print strategies and exit")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("generate", help="generate per-client dataset files")
    common(gen, fed=False)
    gen.set_defaults(func=cmd_generate)

    ins = sub.add_parser("inspect", help="dump a dataset or parameter file")
    ins.add_argument("path")
    ins.add_argument("--limit", type=int, default=None, help="max samples to print")
    ins.set_defaults(func=cmd_inspect)

    ls = sub.add_parser("list-strategies", help="print available strategies")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ContractError, DimensionError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
