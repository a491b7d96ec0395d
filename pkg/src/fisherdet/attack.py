"""FGSM and momentum-iterative FGSM (MI-FGSM) under an infinity-norm budget.

MI-FGSM with budget eps, T steps and decay mu:

    alpha = eps / T
    g_{t+1} = mu * g_t + grad / ||grad||_1      (zero term when ||grad||_1 == 0)
    x_{t+1} = clip_[0,1](clip_[x-eps, x+eps](x_t + alpha * sign(g_{t+1})))

The loss is cross-entropy w.r.t. the true label by default, or w.r.t. the
clean prediction when no labels should be used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import LabeledDataset, check_labels
from .errors import ClassIndexError, EmptyDataError

FGSM = "fgsm"
MI_FGSM = "mi_fgsm"
TRUE_LABEL = "true_label"
PREDICTED_LABEL = "predicted_label"


@dataclass(frozen=True)
class AttackConfig:
    method: str = MI_FGSM
    epsilon: float = 0.1
    steps: int = 10
    momentum: float = 1.0
    clip_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.method not in (FGSM, MI_FGSM):
            raise ValueError(f"unknown attack method {self.method!r}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.momentum >= 0:
            raise ValueError("momentum must be >= 0")


def loss_input_grad(net: nn.Network, X, y) -> np.ndarray:
    """Per-sample gradient of cross-entropy(y) w.r.t. the inputs, shape of X."""
    z, caches = nn._run(net, X)
    dz = nn.softmax(z)
    dz[np.arange(len(y)), y] -= 1.0
    return nn._backprop(net, caches, dz, want_params=False, want_input=True)[1]


def _check_targets(net, y):
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= net.num_classes):
        raise ClassIndexError(f"label out of range for C={net.num_classes}")
    return y


def fgsm_batch(net: nn.Network, X, y, eps: float, clip_range=(0.0, 1.0)) -> np.ndarray:
    X = nn._as_batch(net, X)
    y = _check_targets(net, y)
    if eps == 0:
        return X.copy()
    step = np.sign(loss_input_grad(net, X, y))
    return np.clip(X + eps * step, *clip_range)


def mi_fgsm_batch(net: nn.Network, X, y, cfg: AttackConfig) -> np.ndarray:
    X = nn._as_batch(net, X)
    y = _check_targets(net, y)
    if cfg.epsilon == 0:
        return X.copy()
    alpha = cfg.epsilon / cfg.steps
    lo = np.maximum(X - cfg.epsilon, cfg.clip_range[0])
    hi = np.minimum(X + cfg.epsilon, cfg.clip_range[1])
    axes = tuple(range(1, X.ndim))
    g = np.zeros_like(X)
    x_adv = X.copy()
    for _ in range(cfg.steps):
        grad = loss_input_grad(net, x_adv, y)
        l1 = np.abs(grad).sum(axis=axes, keepdims=True)
        normed = np.divide(grad, l1, out=np.zeros_like(grad), where=l1 > 0)
        g = cfg.momentum * g + normed
        x_adv = np.clip(x_adv + alpha * np.sign(g), lo, hi)
    return x_adv


def fgsm(net: nn.Network, x, y: int, eps: float) -> np.ndarray:
    """Single-step attack ``clip(x + eps * sign(grad_x CE(x, y)), 0, 1)``."""
    x = nn._check_single(net, x)
    return fgsm_batch(net, x[None], [y], eps)[0]


def mi_fgsm(net: nn.Network, x, y: int, cfg: AttackConfig) -> np.ndarray:
    x = nn._check_single(net, x)
    return mi_fgsm_batch(net, x[None], [y], cfg)[0]


def run_attack(net, X, y, cfg: AttackConfig) -> np.ndarray:
    if cfg.method == FGSM:
        return fgsm_batch(net, X, y, cfg.epsilon, cfg.clip_range)
    return mi_fgsm_batch(net, X, y, cfg)


@dataclass
class AttackResult:
    adversarial: LabeledDataset
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    success: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(self.success.mean())


def attack_batch(net: nn.Network, dataset: LabeledDataset, cfg: AttackConfig,
                 label_source: str = TRUE_LABEL, chunk: int = 250) -> AttackResult:
    """Attack every sample; failed attacks are kept, flagged ``success=False``.

    Success means the prediction changed relative to the clean prediction.
    """
    if len(dataset) == 0:
        raise EmptyDataError("cannot attack an empty dataset")
    if label_source not in (TRUE_LABEL, PREDICTED_LABEL):
        raise ValueError(f"unknown label source {label_source!r}")
    check_labels(dataset.labels, net.num_classes)
    X = dataset.inputs.reshape((len(dataset),) + net.input_shape)
    out = np.empty_like(X)
    clean_pred = np.empty(len(X), dtype=np.int64)
    adv_pred = np.empty(len(X), dtype=np.int64)
    for start in range(0, len(X), chunk):
        sl = slice(start, start + chunk)
        try:
            clean_pred[sl] = nn.predict_batch(net, X[sl])
            target = dataset.labels[sl] if label_source == TRUE_LABEL else clean_pred[sl]
            out[sl] = run_attack(net, X[sl], target, cfg)
            adv_pred[sl] = nn.predict_batch(net, out[sl])
        except Exception as exc:
            raise type(exc)(f"attack failed in samples {start}..{start + len(X[sl]) - 1}: {exc}") from exc
    adv = LabeledDataset(out.reshape(dataset.inputs.shape), dataset.labels,
                         note=f"{cfg.method} eps={cfg.epsilon} T={cfg.steps} mu={cfg.momentum}")
    return AttackResult(adv, clean_pred, adv_pred, clean_pred != adv_pred)


def write_success_csv(result: AttackResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "clean_pred", "adv_pred", "success"])
        for i, (c, a, s) in enumerate(zip(result.clean_pred, result.adv_pred, result.success)):
            w.writerow([i, int(c), int(a), int(s)])
