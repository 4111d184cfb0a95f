"""Multi-seed studies shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from . import presets
from .config import load_config
from .experiment import fit_single_client, run_experiment
from .priors import PRIOR_MODES, default_catalog
from .synth import RoiLayout, generate, split_train_test


def _quiet(_msg):
    pass


def preset_split(seed: int):
    """The preset dataset for ``seed`` and its single 70/30 split."""
    ds = generate(replace(presets.GENERATOR, seed=seed), RoiLayout.default(default_catalog()))
    sp = split_train_test(ds, 0.7, 1, seed)[0]
    return ds.subset(sp.train), ds.subset(sp.test)


def prior_ablation(seeds=presets.SEEDS, epochs: int = presets.ABLATION_EPOCHS, log=_quiet) -> dict:
    """Final test UF1 of single-client training under each prior mode."""
    scores = {m: [] for m in PRIOR_MODES}
    for seed in seeds:
        train, test = preset_split(seed)
        for mode in PRIOR_MODES:
            tic = time.perf_counter()
            fit = fit_single_client(train, test, replace(presets.MODEL, prior_mode=mode), epochs,
                                    presets.OPTIM, seed=seed)
            scores[mode].append(fit.final["uf1"])
            log(f"seed {seed} {mode:>5}: UF1 {fit.final['uf1']:.4f} ({time.perf_counter() - tic:.0f}s)")
    return {"seeds": list(seeds), "epochs": epochs, "uf1": scores,
            "mean_uf1": {m: float(np.mean(v)) for m, v in scores.items()}}


def learnability(threshold: float, seeds=presets.SEEDS, max_epochs: int = 50, log=_quiet) -> dict:
    """Epoch at which each seed first reaches ``threshold`` test UF1 (None if never)."""
    reached, best = [], []
    for seed in seeds:
        train, test = preset_split(seed)
        fit = fit_single_client(train, test, presets.MODEL, max_epochs, presets.OPTIM, seed=seed,
                                target_uf1=threshold)
        reached.append(fit.reached_epoch)
        best.append(max(h["uf1"] for h in fit.history))
        log(f"seed {seed}: reached {threshold} at epoch {fit.reached_epoch}, best UF1 {best[-1]:.4f}")
    return {"threshold": threshold, "seeds": list(seeds), "reached_epoch": reached, "best_uf1": best}


def federated_comparison(config_path, seeds=presets.SEEDS, log=_quiet) -> dict:
    """Mean per-client final-round UF1 of every configured strategy, per seed."""
    base = load_config(config_path)
    scores = {s: [] for s in base.federated.strategies}
    for seed in seeds:
        tic = time.perf_counter()
        summary = run_experiment(base.with_overrides(seed=seed), log=_quiet, write=False)
        for s, block in summary["strategies"].items():
            scores[s].append(block["mean_client_uf1"])
        log(f"seed {seed}: " + "  ".join(f"{s} {v[-1]:.4f}" for s, v in scores.items())
            + f"  ({time.perf_counter() - tic:.0f}s)")
    return {"config": str(config_path), "seeds": list(seeds), "uf1": scores,
            "mean_uf1": {s: float(np.mean(v)) for s, v in scores.items()}}
