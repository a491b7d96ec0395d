"""Scalable Fisher-information scores and the Fisher information sensitivity map.

All quantities are written over *class groups*: in full mode every class
is its own group, in two-class mode the groups are {y_hat} and "every other
class". For a group S with total probability g_S,

    F = sum_S g_S * grad log g_S  grad^T log g_S

so the trace is ``sum_S g_S |grad log g_S|^2`` and the quadratic form is
``sum_S (v . grad g_S)(v . grad log g_S)``. Log-group probabilities are
evaluated with log-sum-exp so saturated predictions stay finite.

y_hat is always taken from the unperturbed network.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import nn
from .errors import DegenerateDirectionError, DimensionError, EmptyDataError, NumericError

FULL = "full_C"
TWO_CLASS = "two_class"
BACKPROP = "backprop"
FINITE_DIFFERENCE = "finite_difference"


@dataclass(frozen=True)
class ScoreConfig:
    class_mode: str = TWO_CLASS
    derivative_mode: str = FINITE_DIFFERENCE
    fd_step: float = 1e-4
    lam: float = 0.01

    def __post_init__(self):
        if self.class_mode not in (FULL, TWO_CLASS):
            raise ValueError(f"class_mode must be {FULL!r} or {TWO_CLASS!r}")
        if self.derivative_mode not in (BACKPROP, FINITE_DIFFERENCE):
            raise ValueError(f"derivative_mode must be {BACKPROP!r} or {FINITE_DIFFERENCE!r}")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be > 0")
        if not self.lam > 0:
            raise ValueError("lam must be > 0")


@dataclass
class DirectionVector:
    v: np.ndarray
    scale: float
    label_used: int
    normalized: bool = False

    def __len__(self):
        return self.v.size


@dataclass
class ScoreRecord:
    trace: float
    form: float
    normalized_form: float
    predicted_class: int
    max_prob: float
    config: ScoreConfig


@dataclass
class FisMap:
    values: np.ndarray
    fd_step: float
    class_mode: str
    direction: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def absolute(self) -> np.ndarray:
        return np.abs(self.values)


def two_class_reduce(probs, yhat: int) -> np.ndarray:
    """Collapse ``probs`` to (p_yhat, sum of the rest)."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= yhat < probs.size:
        raise IndexError(f"class index {yhat} out of range for C={probs.size}")
    rest = np.delete(probs, yhat).sum()
    return np.array([probs[yhat], rest])


def class_groups(num_classes: int, yhat: int, class_mode: str) -> np.ndarray:
    """Boolean masks (G, C) for the class groups of ``class_mode``."""
    if class_mode == FULL:
        return np.eye(num_classes, dtype=bool)
    top = np.zeros(num_classes, dtype=bool)
    top[yhat] = True
    if num_classes == 1:
        return top[None]  # the complement group is empty
    return np.stack([top, ~top])


def _as_vector(net, v) -> np.ndarray:
    arr = v.v if isinstance(v, DirectionVector) else np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size != net.num_params:
        raise DimensionError(f"direction has length {arr.size}, network has p={net.num_params}")
    return arr


def _group_logs(z: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """log g_S for logits z (C,) and every group in masks (G, C)."""
    out = np.empty(len(masks))
    for k, m in enumerate(masks):
        out[k] = nn.group_log_prob_grad(z[None], m)[0][0]
    return out


def _group_log_grads(net, x, masks, params=None, *, wrt="params"):
    """Per-group ``log g_S`` and its gradient w.r.t. parameters or input."""
    G = len(masks)
    X = np.broadcast_to(x, (G,) + x.shape)
    z, caches = nn._run(net, X, params)
    dz = np.empty_like(z)
    log_g = np.empty(G)
    for k, m in enumerate(masks):
        lg, d = nn.group_log_prob_grad(z[k:k + 1], m)
        log_g[k], dz[k] = lg[0], d[0]
    if wrt == "params":
        grads = nn._backprop(net, caches, dz, params=params, per_sample=True)[0]
    else:
        grads = nn._backprop(net, caches, dz, params=params, want_params=False, want_input=True)[1]
    return log_g, grads


def predicted_class(net, x) -> tuple[int, np.ndarray]:
    probs = nn.forward(net, x)
    return int(np.argmax(probs)), probs


def direction_v(net, x, cfg: ScoreConfig = ScoreConfig(), normalized: bool = False) -> DirectionVector:
    """``lam * grad_theta log f^yhat(x)``, optionally scaled to unit length."""
    x = nn._check_single(net, x)
    yhat, _ = predicted_class(net, x)
    v = cfg.lam * nn.grad_params(net, x, nn.log_prob(yhat))
    if normalized:
        norm = np.linalg.norm(v)
        if norm == 0:
            raise DegenerateDirectionError("direction vector has zero norm")
        v = v / norm
    return DirectionVector(v=v, scale=cfg.lam, label_used=yhat, normalized=normalized)


def fisher_trace(net, x, cfg: ScoreConfig = ScoreConfig()) -> float:
    """Trace of the Fisher matrix at ``x``, O(G * p) via backpropagation."""
    x = nn._check_single(net, x)
    yhat, _ = predicted_class(net, x)
    masks = class_groups(net.num_classes, yhat, cfg.class_mode)
    log_g, grads = _group_log_grads(net, x, masks)
    value = float(np.sum(np.exp(log_g) * np.einsum("gp,gp->g", grads, grads)))
    if not np.isfinite(value):
        raise NumericError("non-finite Fisher trace")
    return value


def _form_backprop(net, x, v, masks) -> float:
    log_g, grads = _group_log_grads(net, x, masks)
    d = grads @ v
    return float(np.sum(np.exp(log_g) * d * d))


def _form_fd(net, x, v, masks, fd_step) -> float:
    z0 = nn._run(net, x[None])[0][0]
    z1 = nn._run(net, x[None], net.params + fd_step * v)[0][0]
    lg0, lg1 = _group_logs(z0, masks), _group_logs(z1, masks)
    dg = (np.exp(lg1) - np.exp(lg0)) / fd_step
    dlog = (lg1 - lg0) / fd_step
    return float(np.sum(dg * dlog))


def fisher_form(net, x, v, cfg: ScoreConfig = ScoreConfig()) -> float:
    """Quadratic form ``v^T F v`` in backprop or finite-difference mode."""
    x = nn._check_single(net, x)
    v = _as_vector(net, v)
    yhat, _ = predicted_class(net, x)
    masks = class_groups(net.num_classes, yhat, cfg.class_mode)
    if cfg.derivative_mode == BACKPROP:
        value = _form_backprop(net, x, v, masks)
    else:
        value = _form_fd(net, x, v, masks, cfg.fd_step)
    if not np.isfinite(value):
        raise NumericError("non-finite Fisher form")
    return value


def fisher_form_normalized(net, x, cfg: ScoreConfig = ScoreConfig()) -> float:
    """Quadratic form along the unit-length direction; independent of lam."""
    vbar = direction_v(net, x, cfg, normalized=True)
    return fisher_form(net, x, vbar, cfg)


def fis(net, x, v, cfg: ScoreConfig = ScoreConfig()) -> FisMap:
    """Fisher information sensitivity: one value per input node.

    value_i = sum_S a_i^S b_i^S with a^S, b^S the forward differences in
    theta (step fd_step along v) of grad_x g_S and grad_x log g_S.
    """
    x = nn._check_single(net, x)
    vec = _as_vector(net, v)
    yhat, _ = predicted_class(net, x)
    masks = class_groups(net.num_classes, yhat, cfg.class_mode)
    h = cfg.fd_step
    lg0, dlog0 = _group_log_grads(net, x, masks, wrt="input")
    lg1, dlog1 = _group_log_grads(net, x, masks, net.params + h * vec, wrt="input")
    bshape = (-1,) + (1,) * x.ndim
    dg0 = np.exp(lg0).reshape(bshape) * dlog0
    dg1 = np.exp(lg1).reshape(bshape) * dlog1
    a = (dg1 - dg0) / h
    b = (dlog1 - dlog0) / h
    values = np.sum(a * b, axis=0)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite FIS values")
    desc = "zero" if not np.any(vec) else f"norm={np.linalg.norm(vec):.6g}"
    if isinstance(v, DirectionVector):
        desc = f"lam={v.scale:g} label={v.label_used} normalized={v.normalized} " + desc
    return FisMap(values=values, fd_step=h, class_mode=cfg.class_mode, direction=desc)


def score_sample(net, x, cfg: ScoreConfig = ScoreConfig()) -> ScoreRecord:
    """Trace, form and normalized form for one input, sharing the gradient work."""
    x = nn._check_single(net, x)
    yhat, probs = predicted_class(net, x)
    masks = class_groups(net.num_classes, yhat, cfg.class_mode)
    log_g, grads = _group_log_grads(net, x, masks)
    g = np.exp(log_g)
    trace = float(np.sum(g * np.einsum("gp,gp->g", grads, grads)))

    # log f^yhat is log g of the first group in both modes
    top = int(np.flatnonzero(masks[:, yhat])[0])
    v = cfg.lam * grads[top]
    norm = np.linalg.norm(v)
    if norm == 0:
        raise DegenerateDirectionError("direction vector has zero norm")
    vbar = v / norm
    if cfg.derivative_mode == BACKPROP:
        form = float(np.sum(g * (grads @ v) ** 2))
        nform = float(np.sum(g * (grads @ vbar) ** 2))
    else:
        form = _form_fd(net, x, v, masks, cfg.fd_step)
        nform = _form_fd(net, x, vbar, masks, cfg.fd_step)
    if not np.all(np.isfinite([trace, form, nform])):
        raise NumericError("non-finite score")
    return ScoreRecord(trace=trace, form=form, normalized_form=nform,
                       predicted_class=yhat, max_prob=float(probs[yhat]), config=cfg)


SCORE_COLUMNS = ("sample_index", "label", "predicted", "is_adversarial",
                 "trace", "form", "normalized_form")


def score_dataset(net, inputs, labels, cfg: ScoreConfig = ScoreConfig(),
                  is_adversarial: bool | None = None, indices: Iterable[int] | None = None) -> list[dict]:
    """Score every input; rows are ordered by sample index."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if len(inputs) == 0:
        raise EmptyDataError("no samples to score")
    indices = range(len(inputs)) if indices is None else list(indices)
    rows = []
    for i, x, y in zip(indices, inputs, labels):
        rec = score_sample(net, x, cfg)
        rows.append({
            "sample_index": int(i), "label": int(y), "predicted": rec.predicted_class,
            "is_adversarial": "" if is_adversarial is None else int(is_adversarial),
            "trace": rec.trace, "form": rec.form, "normalized_form": rec.normalized_form,
        })
    return rows


def write_scores_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_scores_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_dict(cfg: ScoreConfig) -> dict:
    return asdict(cfg)
