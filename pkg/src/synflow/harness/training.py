"""Masked SGD training with momentum, weight decay and step learning-rate drops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import forward, loss_and_grad
from ..netgraph import Mask, ParamSet, ones_mask
from .data import Dataset

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1


@dataclass
class Hyperparams:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drops: tuple = (15,)
    drop_factor: float = 0.1
    loss: str = "cross-entropy"
    seed: int = 0
    eval_every_epoch: bool = True


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    failed: bool = False
    reason: str = ""

    @property
    def final_test_accuracy(self) -> float:
        return self.test_accuracy[-1] if self.test_accuracy else float("nan")


def predict(params: ParamSet, mask: Mask | None, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [forward(params, mask, x[s:s + chunk], "eval").output.argmax(axis=1) for s in range(0, len(x), chunk)]
    return np.concatenate(out)


def accuracy(params: ParamSet, mask: Mask | None, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(params, mask, x) == y))


def _update_running_stats(params: ParamSet, trace) -> None:
    for i, layer in enumerate(params.spec.layers):
        if layer.kind == "batchnorm":
            _, _, mean, var = trace.caches[i]
            t = params.tensors[i]
            t["running_mean"] = (1 - BN_MOMENTUM) * t["running_mean"] + BN_MOMENTUM * mean
            t["running_var"] = (1 - BN_MOMENTUM) * t["running_var"] + BN_MOMENTUM * var


def train(params: ParamSet, mask: Mask | None, dataset: Dataset, hp: Hyperparams) -> tuple[ParamSet, History]:
    """Train a copy of ``params``; masked weights stay exactly zero.

    A non-finite loss stops training and marks the history failed instead
    of raising.
    """
    mask = mask if mask is not None else ones_mask(params)
    p = params.copy()
    for i, m in mask.items():
        p.tensors[i]["weight"] *= m
    has_bn = any(l.kind == "batchnorm" for l in p.spec.layers)
    velocity = {(i, name): np.zeros_like(a) for i, name, a in p.items() if not name.startswith("running")}
    rng = np.random.default_rng(hp.seed)
    history = History()
    n = len(dataset.x_train)
    lr = hp.lr
    for epoch in range(hp.epochs):
        if epoch in hp.lr_drops:
            lr *= hp.drop_factor
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            batch = (dataset.x_train[idx], dataset.y_train[idx])
            value, grads, trace = loss_and_grad(p, mask, batch, hp.loss, "train", return_trace=True)
            if has_bn:
                _update_running_stats(p, trace)
            if not np.isfinite(value):
                history.failed, history.reason = True, f"non-finite loss in epoch {epoch}"
                log.warning("training diverged in epoch %d", epoch)
                return p, history
            total += value * len(idx)
            for i, name, g in grads.items():
                a = p.tensors[i][name]
                step = g + hp.weight_decay * a
                if name == "weight":
                    step = step * mask[i]
                v = velocity[(i, name)]
                v *= hp.momentum
                v += step
                p.tensors[i][name] = a - lr * v
        history.loss.append(total / n)
        if hp.eval_every_epoch or epoch == hp.epochs - 1:
            history.train_accuracy.append(accuracy(p, mask, dataset.x_train, dataset.y_train))
            history.test_accuracy.append(accuracy(p, mask, dataset.x_test, dataset.y_test))
    return p, history
