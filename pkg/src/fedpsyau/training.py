"""Minibatch training and evaluation loops shared by every strategy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericError
from .metrics import ConfusionMatrix, uar, uf1
from .params import ParamSet


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32


def proximal_term(model, anchor: ParamSet, alpha4: float):
    """``alpha4 / 2 * ||W - anchor||^2`` over trainable parameters."""
    terms = [ad.square_distance(p, anchor[name]) for name, p in model.named_parameters()]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (0.5 * alpha4)


def train_epochs(model, data, epochs: int, optim: OptimConfig, rng: np.random.Generator,
                 anchor: ParamSet | None = None, alpha4: float = 0.0) -> float:
    """Run ``epochs`` passes of SGD on ``L_MER (+ proximal term)``; returns the mean batch loss."""
    opt = ad.SGD(model.parameters(), optim.lr, optim.momentum)
    model.train()
    losses = []
    for _ in range(epochs):
        for batch in data.batches(optim.batch_size, rng):
            opt.zero_grad()
            loss, _ = model.loss(batch)
            if alpha4 > 0.0:
                loss = loss + proximal_term(model, anchor, alpha4)
            if not np.isfinite(loss.item()):
                raise NumericError("training loss is not finite")
            loss.backward()
            opt.step()
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def evaluate(model, data, batch_size: int = 64) -> dict:
    """Confusion matrix, UF1 and UAR of ``model`` on ``data``."""
    model.eval()
    preds = [model.predict(b) for b in data.batches(batch_size)]
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=int)
    cm = ConfusionMatrix.from_labels(data.emotion, pred, data.n_classes)
    return {"cm": cm, "uf1": uf1(cm), "uar": uar(cm)}
