"""Simulated federated training: clients, server and aggregation rules.

Clients own their data and model. Each round they train locally and send
the server a serialized parameter set plus their sample count; the server
never sees anything else. Strategies:

``fedavg``     global data-weighted mean, plain local objective
``fedprox``    same aggregation, proximal term towards the distributed model
``pfedprox``   per-client init ``theta * own + sum_j omega_j * peer_j``, proximal term
``local-only`` no exchange at all (isolated baseline)
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, NumericError
from .params import ParamSet, deserialize, serialize, weighted_sum
from .training import OptimConfig, evaluate, train_epochs

STRATEGIES = ("fedavg", "fedprox", "pfedprox", "local-only")


@dataclass(frozen=True)
class FedConfig:
    strategy: str = "pfedprox"
    rounds: int = 10
    local_epochs: int = 1
    theta: float = 0.9
    alpha4: float = 0.01
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ContractError("rounds and local_epochs must be >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ContractError(f"theta must lie in [0, 1], got {self.theta}")
        if self.alpha4 < 0:
            raise ContractError("alpha4 must be non-negative")

    @property
    def proximal_weight(self) -> float:
        return self.alpha4 if self.strategy in ("fedprox", "pfedprox") else 0.0


@dataclass
class ClientState:
    client_id: int
    train: object
    test: object | None
    model: object
    params: ParamSet | None = None
    history: list = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.train)

    def __post_init__(self):
        if len(self.train) < 1:
            raise ContractError(f"client {self.client_id} has no training samples")


@dataclass(frozen=True)
class ClientUpdate:
    """The only thing that crosses from a client to the server."""

    client_id: int
    n_samples: int
    payload: bytes


@dataclass
class ClientRound:
    client_id: int
    n_train: int
    train_loss: float
    metrics: dict


@dataclass
class RoundRecord:
    round: int
    strategy: str
    clients: list[ClientRound]
    wall_time: float


# ------------------------------------------------------------------ aggregation


def _check_models(models):
    if not models:
        raise ContractError("need at least one model to aggregate")
    first = models[0][0]
    for p, n in models:
        if n < 1:
            raise ContractError(f"sample count must be >= 1, got {n}")
        if not first.conforms(p):
            raise ContractError("client parameter sets do not conform")


def aggregate_fedavg(models: list[tuple[ParamSet, int]]) -> ParamSet:
    """Data-size weighted mean ``sum_i (n_i / sum n) W_i``."""
    _check_models(models)
    total = sum(n for _, n in models)
    return weighted_sum([p for p, _ in models], [n / total for _, n in models])


def pfedprox_weights(sizes: list[int], i: int, theta: float) -> np.ndarray:
    """Mixing weights for client ``i``: ``theta`` on itself, ``(1 - theta) n_j / sum_{k != i} n_k`` on peers."""
    sizes = np.asarray(sizes, dtype=np.float64)
    peers = sizes.sum() - sizes[i]
    w = (1.0 - theta) * sizes / peers if peers > 0 else np.zeros_like(sizes)
    w[i] = theta
    return w


def aggregate_pfedprox(models: list[tuple[ParamSet, int]], theta: float | list[float]) -> list[ParamSet]:
    """One personalized round-start model per client.

    ``theta`` may be a single value or one value per client.
    """
    _check_models(models)
    k = len(models)
    thetas = [theta] * k if np.isscalar(theta) else list(theta)
    if len(thetas) != k or any(not 0.0 <= t <= 1.0 for t in thetas):
        raise ContractError("theta must lie in [0, 1], one value or one per client")
    if k == 1 and thetas[0] < 1.0:
        raise ContractError("a single client has no peers to mix with (theta < 1)")
    sizes = [n for _, n in models]
    sets = [p for p, _ in models]
    return [weighted_sum(sets, list(pfedprox_weights(sizes, i, thetas[i]))) for i in range(k)]


class Server:
    """Aggregates serialized client updates; sees only bytes and sample counts."""

    def __init__(self, strategy: str, theta: float = 0.9):
        if strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.theta = theta
        self.global_params: ParamSet | None = None

    def aggregate(self, updates: list[ClientUpdate]) -> dict[int, bytes]:
        """Map client id to the serialized model it starts the next round from."""
        for u in updates:
            if not isinstance(u, ClientUpdate) or not isinstance(u.payload, bytes):
                raise ContractError("server accepts only ClientUpdate messages with byte payloads")
        updates = sorted(updates, key=lambda u: u.client_id)
        models = [(deserialize(u.payload), u.n_samples) for u in updates]
        if self.strategy == "local-only":
            return {u.client_id: u.payload for u in updates}
        if self.strategy == "pfedprox":
            inits = aggregate_pfedprox(models, self.theta) if len(models) > 1 else [models[0][0]]
            return {u.client_id: serialize(p) for u, p in zip(updates, inits)}
        self.global_params = aggregate_fedavg(models)
        blob = serialize(self.global_params)
        return {u.client_id: blob for u in updates}


# ------------------------------------------------------------------ client side


def local_train(client: ClientState, start: ParamSet, epochs: int, alpha4: float,
                optim: OptimConfig, rng: np.random.Generator, round_index: int = 0) -> tuple[ParamSet, float]:
    """Train from ``start`` on ``L_MER + alpha4/2 ||W - start||^2``.

    Returns the updated parameters and the mean training loss.
    """
    model = client.model
    model.load_state(start)
    if hasattr(model, "set_round"):
        model.set_round(round_index)
    try:
        loss = train_epochs(model, client.train, epochs, optim, rng, anchor=start, alpha4=alpha4)
    except NumericError as exc:
        raise NumericError(f"client {client.client_id}, round {round_index + 1}: {exc}") from exc
    return model.state(), loss


def default_evaluator(client: ClientState, model) -> dict:
    return evaluate(model, client.test) if client.test is not None and len(client.test) else {}


def run_rounds(clients: list[ClientState], cfg: FedConfig, init: ParamSet,
               evaluator: Callable[[ClientState, object], dict] = default_evaluator) -> list[RoundRecord]:
    """Execute ``cfg.rounds`` federated rounds, clients in id order.

    Every client starts from ``init``. After aggregation each client loads
    the model it was sent and is evaluated with it.
    """
    clients = sorted(clients, key=lambda c: c.client_id)
    for c in clients:
        c.params = init.copy()
    server = Server(cfg.strategy, cfg.theta)
    records = []
    for t in range(1, cfg.rounds + 1):
        tic = time.perf_counter()
        updates, losses = [], {}
        for c in clients:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, c.client_id, t]))
            params, loss = local_train(
                c, c.params, cfg.local_epochs, cfg.proximal_weight, cfg.optim, rng, round_index=t - 1
            )
            losses[c.client_id] = loss
            updates.append(ClientUpdate(c.client_id, c.n_samples, serialize(params)))
        sent = server.aggregate(updates)
        rows = []
        for c in clients:
            c.params = deserialize(sent[c.client_id])
            c.model.load_state(c.params)
            if hasattr(c.model, "set_round"):
                c.model.set_round(t)
            metrics = evaluator(c, c.model)
            row = ClientRound(c.client_id, c.n_samples, losses[c.client_id], metrics)
            c.history.append(row)
            rows.append(row)
        records.append(RoundRecord(t, cfg.strategy, rows, time.perf_counter() - tic))
    return records
