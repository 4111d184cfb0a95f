"""End-to-end experiment driver: data, priors, clients, rounds, artifacts.

``run_experiment`` writes three kinds of artifact into ``cfg.out_dir``:

``results.csv``   one row per (strategy, round, client), metrics averaged over splits
``summary.json``  final-round per-client UF1/UAR as mean and std over splits
``<strategy>/confmat_<client>_<round>.csv``  confusion counts summed over splits

Wall-clock times go to the log only, so reruns with one seed are byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, sub_int, sub_seed
from .federated import ClientState, FedConfig, run_rounds
from .metrics import ConfusionMatrix, per_class_f1
from .model import MERNet, ModelConfig
from .priors import AuCatalog, build_priors, default_catalog, read_prior_config
from .synth import Dataset, RoiLayout, generate, partition_clients, split_train_test
from .training import OptimConfig, evaluate, train_epochs

CSV_FIELDS = ("strategy", "round", "client", "n_train", "n_test", "train_loss",
              "uf1", "uar", "uf1_std", "uar_std", "zero_support_classes")


def _f(x: float) -> str:
    return f"{x:.10f}"


def build_client_model(cfg: ModelConfig, catalog: AuCatalog, prior_cfg: dict, train: Dataset,
                       horizon: int, rng: np.random.Generator) -> MERNet:
    """A network whose data prior ``D`` comes from this client's own training labels."""
    pack = build_priors(catalog, prior_cfg, train.au, cfg.prior_mode, horizon=horizon)
    return MERNet(cfg, catalog, pack, rng)


def client_data(cfg: ExperimentConfig) -> list[Dataset]:
    spec = replace(cfg.generator, seed=sub_int(cfg.seed, "generator"))
    ds = generate(spec, RoiLayout.default(default_catalog()))
    return partition_clients(ds, cfg.federated.clients, seed=sub_int(cfg.seed, "partition"))


@dataclass
class _Cell:
    """Per (strategy, round, client) accumulator over splits."""

    n_train: int = 0
    n_test: int = 0
    losses: list = field(default_factory=list)
    uf1: list = field(default_factory=list)
    uar: list = field(default_factory=list)
    cm: ConfusionMatrix | None = None

    def add(self, n_train, n_test, loss, metrics):
        self.n_train, self.n_test = n_train, n_test
        self.losses.append(loss)
        self.uf1.append(metrics["uf1"])
        self.uar.append(metrics["uar"])
        self.cm = metrics["cm"] if self.cm is None else self.cm + metrics["cm"]


def run_experiment(cfg: ExperimentConfig, log=print, write: bool = True) -> dict:
    """Run every configured strategy over every split and emit the artifacts."""
    catalog = default_catalog()
    prior_cfg = read_prior_config(cfg.priors_path)
    fed = cfg.federated
    parts = client_data(cfg)
    splits = [split_train_test(p, cfg.split.ratio, cfg.split.repeats, seed=sub_int(cfg.seed, "split", i))
              for i, p in enumerate(parts)]
    init = MERNet(cfg.model, catalog, build_priors(catalog, prior_cfg, None, cfg.model.prior_mode),
                  np.random.default_rng(sub_seed(cfg.seed, "init"))).state()
    cells: dict[tuple, _Cell] = {}
    for strategy in fed.strategies:
        fcfg = FedConfig(strategy, fed.rounds, fed.local_epochs, fed.theta, fed.alpha4, fed.optim,
                         seed=sub_int(cfg.seed, "train", strategy))
        for r in range(cfg.split.repeats):
            tic = time.perf_counter()
            data = [(p.subset(sp[r].train), p.subset(sp[r].test)) for p, sp in zip(parts, splits)]
            pooled = Dataset.concat([tr for tr, _ in data]) if cfg.prior_scope == "global" else None
            clients = []
            for cid, (train, test) in enumerate(data):
                rng = np.random.default_rng(sub_seed(cfg.seed, "model", cid))
                model = build_client_model(cfg.model, catalog, prior_cfg, train if pooled is None else pooled,
                                           fed.rounds, rng)
                clients.append(ClientState(cid, train, test, model))
            for rec in run_rounds(clients, fcfg, init):
                for row in rec.clients:
                    key = (strategy, rec.round, row.client_id)
                    n_test = len(clients[row.client_id].test)
                    cells.setdefault(key, _Cell()).add(row.n_train, n_test, row.train_loss, row.metrics)
            log(f"[{strategy}] split {r + 1}/{cfg.split.repeats} done in {time.perf_counter() - tic:.1f}s")
    summary = summarize(cfg, cells)
    if write:
        write_artifacts(Path(cfg.out_dir), cells, summary)
    return summary


def summarize(cfg: ExperimentConfig, cells: dict) -> dict:
    last = cfg.federated.rounds
    out = {"seed": cfg.seed, "splits": cfg.split.repeats, "rounds": last, "strategies": {}}
    for strategy in cfg.federated.strategies:
        per_client = {}
        for cid in range(cfg.federated.clients):
            c = cells[(strategy, last, cid)]
            per_client[str(cid)] = {
                "n_train": c.n_train,
                "n_test": c.n_test,
                "uf1_mean": float(np.mean(c.uf1)),
                "uf1_std": float(np.std(c.uf1)),
                "uar_mean": float(np.mean(c.uar)),
                "uar_std": float(np.std(c.uar)),
                "zero_support_classes": [int(k) for k in np.flatnonzero(per_class_f1(c.cm)[1])],
            }
        out["strategies"][strategy] = {
            "clients": per_client,
            "mean_client_uf1": float(np.mean([v["uf1_mean"] for v in per_client.values()])),
            "mean_client_uar": float(np.mean([v["uar_mean"] for v in per_client.values()])),
        }
    return out


def results_csv(cells: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for (strategy, rnd, cid), c in cells.items():
        w.writerow([strategy, rnd, cid, c.n_train, c.n_test, _f(np.mean(c.losses)),
                    _f(np.mean(c.uf1)), _f(np.mean(c.uar)), _f(np.std(c.uf1)), _f(np.std(c.uar)),
                    ";".join(str(int(k)) for k in np.flatnonzero(per_class_f1(c.cm)[1]))])
    return buf.getvalue()


def write_artifacts(out: Path, cells: dict, summary: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(cells))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for (strategy, rnd, cid), c in cells.items():
        d = out / strategy
        d.mkdir(exist_ok=True)
        (d / f"confmat_{cid}_{rnd}.csv").write_text(c.cm.to_csv())


# ------------------------------------------------------------------ single client


@dataclass
class FitResult:
    history: list[dict]
    reached_epoch: int | None

    @property
    def final(self) -> dict:
        return self.history[-1]


def fit_single_client(train: Dataset, test: Dataset, model_cfg: ModelConfig, epochs: int,
                      optim: OptimConfig = OptimConfig(), seed: int = 0, prior_cfg: dict | None = None,
                      target_uf1: float | None = None) -> FitResult:
    """Centralised training with per-epoch test metrics.

    The prior weight decays over ``epochs``. With ``target_uf1`` set, training
    stops at the first epoch whose test UF1 reaches it.
    """
    catalog = default_catalog()
    prior_cfg = read_prior_config() if prior_cfg is None else prior_cfg
    model = build_client_model(model_cfg, catalog, prior_cfg, train, epochs,
                               np.random.default_rng(sub_seed(seed, "model")))
    rng = np.random.default_rng(sub_seed(seed, "train"))
    history = []
    for ep in range(epochs):
        model.set_round(ep)
        loss = train_epochs(model, train, 1, optim, rng)
        ev = evaluate(model, test)
        history.append({"epoch": ep + 1, "loss": loss, "uf1": ev["uf1"], "uar": ev["uar"]})
        if target_uf1 is not None and ev["uf1"] >= target_uf1:
            return FitResult(history, ep + 1)
    return FitResult(history, None)

