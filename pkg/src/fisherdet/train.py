"""Minibatch SGD with classical momentum under mean cross-entropy."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import LabeledDataset, check_labels
from .errors import EmptyDataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def batch_loss_grad(net: nn.Network, X, y, params=None):
    """Mean cross-entropy over the batch, its parameter gradient, and #correct."""
    z, caches = nn._run(net, X, params)
    logp = nn.log_softmax(z)
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    grad = nn._backprop(net, caches, dz / n, params=params)[0]
    correct = int(np.sum(z.argmax(axis=1) == y))
    return float(loss), grad, correct


def sgd_step(params, velocity, grad, cfg: TrainConfig):
    velocity = cfg.momentum * velocity + grad
    return params - cfg.learning_rate * velocity, velocity


def accuracy(net: nn.Network, data: LabeledDataset) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    if len(data) == 0:
        raise EmptyDataError("accuracy of an empty dataset")
    check_labels(data.labels, net.num_classes)
    return float(np.mean(nn.predict_batch(net, data.inputs) == data.labels))


def sgd_train(net: nn.Network, data: LabeledDataset, cfg: TrainConfig,
              test: LabeledDataset | None = None):
    """Train ``net`` and return ``(trained_net, history)``.

    ``history`` holds one dict per epoch: mean training loss and accuracy
    over that epoch's minibatches, plus test accuracy when ``test`` is given.
    """
    if len(data) == 0:
        raise EmptyDataError("cannot train on an empty dataset")
    check_labels(data.labels, net.num_classes)
    X = np.asarray(data.inputs, dtype=np.float64).reshape((len(data),) + net.input_shape)
    y = data.labels
    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed).spawn(1)[0]))

    params = np.array(net.params)
    velocity = np.zeros_like(params)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(y))
        total_loss, correct = 0.0, 0
        for start in range(0, len(y), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad, ok = batch_loss_grad(net, X[idx], y[idx], params)
            params, velocity = sgd_step(params, velocity, grad, cfg)
            total_loss += loss * len(idx)
            correct += ok
        row = {"epoch": epoch, "loss": total_loss / len(y), "train_acc": correct / len(y)}
        if test is not None:
            row["test_acc"] = accuracy(net.with_params(params), test.reshaped(net.input_shape))
        if not np.isfinite(row["loss"]):
            raise FloatingPointError(f"training diverged in epoch {epoch}")
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %s", epoch, row["loss"],
                 row["train_acc"], row.get("test_acc", "-"))
        history.append(row)
    return net.with_params(params), history


def write_training_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "test_acc"])
        w.writeheader()
        for row in history:
            w.writerow({"test_acc": "", **row})
