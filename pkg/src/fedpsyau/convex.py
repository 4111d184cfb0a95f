"""A convex stand-in for the federated loop: multinomial logistic regression.

Used to check the aggregation machinery where the objective has a single
optimum, so global-loss trends are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Linear, Module


@dataclass
class ArrayDataset:
    x: np.ndarray
    emotion: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.emotion)

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return ArrayDataset(self.x[idx], self.emotion[idx], self.n_classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start : start + batch_size])

    @staticmethod
    def concat(parts) -> "ArrayDataset":
        return ArrayDataset(np.concatenate([p.x for p in parts]), np.concatenate([p.emotion for p in parts]),
                            parts[0].n_classes)


class LogisticModel(Module):
    def __init__(self, n_features: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(n_features, n_classes, rng)

    def forward(self, x) -> ad.Tensor:
        return self.fc(ad.Tensor(x))

    def loss(self, batch):
        ce = ad.cross_entropy(self(batch.x), batch.emotion)
        return ce, {"ce": ce.item()}

    def predict(self, batch) -> np.ndarray:
        with ad.no_grad():
            return self(batch.x).data.argmax(axis=1)


def heterogeneous_clients(n_clients: int = 5, n_features: int = 10, n_classes: int = 3,
                          seed: int = 0) -> list[ArrayDataset]:
    """Gaussian class clusters; each client gets its own class mix, size and feature shift."""
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=1.5, size=(n_classes, n_features))
    out = []
    for _ in range(n_clients):
        n = int(rng.integers(40, 160))
        mix = rng.dirichlet(np.full(n_classes, 0.7))
        y = rng.choice(n_classes, size=n, p=mix)
        shift = rng.normal(scale=0.3, size=n_features)
        x = means[y] + shift + rng.normal(size=(n, n_features))
        out.append(ArrayDataset(x, y.astype(np.int64), n_classes))
    return out


def global_loss(model: LogisticModel, parts) -> float:
    """Mean cross-entropy of ``model`` over the union of all client data."""
    data = ArrayDataset.concat(parts)
    with ad.no_grad():
        return ad.cross_entropy(model(data.x), data.emotion).item()


def federated_loss_curve(seed: int, strategy: str = "fedprox", rounds: int = 30, n_clients: int = 5,
                         local_epochs: int = 1, alpha4: float = 0.01, optim=None) -> list[float]:
    """Global training loss before round 1 and after every aggregation."""
    from .federated import ClientState, FedConfig, run_rounds
    from .training import OptimConfig

    parts = heterogeneous_clients(n_clients, seed=seed)
    n_features, n_classes = parts[0].x.shape[1], parts[0].n_classes
    clients = [ClientState(i, d, None, LogisticModel(n_features, n_classes, np.random.default_rng(seed)))
               for i, d in enumerate(parts)]
    probe = LogisticModel(n_features, n_classes, np.random.default_rng(seed))
    init = probe.state()
    curve = [global_loss(probe, parts)]

    def record(client, model):
        if client.client_id == 0:
            curve.append(global_loss(model, parts))
        return {}

    cfg = FedConfig(strategy=strategy, rounds=rounds, local_epochs=local_epochs, alpha4=alpha4,
                    optim=optim or OptimConfig(), seed=seed)
    run_rounds(clients, cfg, init, evaluator=record)
    return curve
