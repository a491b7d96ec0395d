"""Brute-force references for tiny networks.

Everything here is deliberately slow and direct: full p x p Fisher
matrices, explicit KL divergences, the full N x N delta_v F matrix, an
O(n^2) pair-count AUC, and finite-difference gradients evaluated through a
loop-based forward pass in extended precision that shares no code with
the vectorised engine in :mod:`fisherdet.nn`.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .errors import NumericError, SizeLimitError
from .fisher import FULL, TWO_CLASS, two_class_reduce

MAX_PARAMS = 500
MAX_INPUTS = 200

REF = np.longdouble


# -- reference forward pass ---------------------------------------------------


def _ref_dense(x, W, b):
    return x @ W + b


def _ref_conv(x, W, b, stride):
    cout, cin, k, _ = W.shape
    _, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.empty((cout, ho, wo), dtype=x.dtype)
    for o in range(cout):
        for r in range(ho):
            for c in range(wo):
                patch = x[:, r * stride:r * stride + k, c * stride:c * stride + k]
                out[o, r, c] = np.sum(patch * W[o]) + b[o]
    return out


def _ref_maxpool(x, window, stride):
    ch, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.empty((ch, ho, wo), dtype=x.dtype)
    for q in range(ch):
        for r in range(ho):
            for c in range(wo):
                out[q, r, c] = x[q, r * stride:r * stride + window, c * stride:c * stride + window].max()
    return out


def reference_logits(net, x, params=None, dtype=REF) -> np.ndarray:
    """Logits of a single input, evaluated layer by layer in ``dtype``."""
    params = np.asarray(net.params if params is None else params, dtype=dtype)
    h = np.asarray(x, dtype=dtype)
    weights = net.layer_params(params)
    for layer, w in zip(net.layers[:-1], weights[:-1]):
        if isinstance(layer, nn.Dense):
            h = _ref_dense(h, *w)
        elif isinstance(layer, nn.Conv2D):
            h = _ref_conv(h, *w, layer.stride)
        elif isinstance(layer, nn.ReLU):
            h = np.where(h > 0, h, dtype(0))
        elif isinstance(layer, nn.MaxPool2D):
            h = _ref_maxpool(h, layer.window, layer.stride)
        elif isinstance(layer, nn.Flatten):
            h = h.reshape(-1)
        else:
            raise TypeError(f"unsupported layer {layer!r}")
    return h


def _ref_lse(z):
    m = z.max()
    return m + np.log(np.sum(np.exp(z - m)))


def reference_selector(net, x, sel, params=None, dtype=REF):
    z = reference_logits(net, x, params, dtype)
    mask = sel.mask(z.size)
    log_g = _ref_lse(z[mask]) - _ref_lse(z)
    if sel.kind == "log_total":
        return _ref_lse(z) - _ref_lse(z)
    if sel.kind == "nll":
        return -log_g
    return log_g if sel.is_log else np.exp(log_g)


def reference_probs(net, x, params=None, dtype=REF) -> np.ndarray:
    z = reference_logits(net, x, params, dtype)
    return np.exp(z - _ref_lse(z))


def fd_grad_params(net, x, sel, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``sel`` over every parameter."""
    theta = np.asarray(net.params, dtype=REF)
    out = np.empty(net.num_params)
    for i in range(net.num_params):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        out[i] = (reference_selector(net, x, sel, tp) - reference_selector(net, x, sel, tm)) / (tp[i] - tm[i])
    return out


def fd_grad_input(net, x, sel, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``sel`` over every input component."""
    x = np.asarray(x, dtype=REF)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = reference_selector(net, xp.reshape(x.shape), sel)
        fm = reference_selector(net, xm.reshape(x.shape), sel)
        out[i] = (fp - fm) / (xp[i] - xm[i])
    return out.reshape(x.shape)


# -- Fisher matrices ------------------------------------------------------------


def _selectors(net, x, class_mode):
    probs = nn.forward(net, x)
    yhat = int(np.argmax(probs))
    if class_mode not in (FULL, TWO_CLASS):
        raise ValueError(f"unknown class mode {class_mode!r}")
    if class_mode == FULL or net.num_classes == 1:
        return [(nn.prob(c), nn.log_prob(c)) for c in range(net.num_classes)], probs
    return [(nn.prob(yhat), nn.log_prob(yhat)),
            (nn.rest_prob(yhat), nn.rest_log_prob(yhat))], two_class_reduce(probs, yhat)


def full_fisher(net, x, class_mode: str = FULL) -> np.ndarray:
    """Full p x p Fisher matrix, sum_c f^c grad log f^c grad^T log f^c."""
    if net.num_params > MAX_PARAMS:
        raise SizeLimitError(f"p={net.num_params} exceeds the oracle limit {MAX_PARAMS}")
    groups, weights = _selectors(net, x, class_mode)
    F = np.zeros((net.num_params, net.num_params))
    for (_, log_sel), w in zip(groups, weights):
        g = nn.grad_params(net, x, log_sel)
        F += w * np.outer(g, g)
    return F


def is_psd(F, tol: float = -1e-10) -> bool:
    return bool(np.allclose(F, F.T, atol=1e-12) and np.linalg.eigvalsh(F).min() >= tol)


def kl_divergence(p, q) -> float:
    """KL(p || q) for probability vectors with strictly positive q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same length")
    if np.any(q <= 0) or np.any(p < 0):
        raise NumericError("KL divergence needs q > 0 and p >= 0")
    nz = p > 0
    return float(max(np.sum(p[nz] * np.log(p[nz] / q[nz])), 0.0))


def kl_between_networks(net_p, net_q, x) -> float:
    """KL(f_p(x) || f_q(x)) from log-softmax outputs (no ratio cancellation)."""
    lp = nn.log_softmax(nn.logits_batch(net_p, np.asarray(x)[None])[0])
    lq = nn.log_softmax(nn.logits_batch(net_q, np.asarray(x)[None])[0])
    return float(np.sum(np.exp(lp) * (lp - lq)))


def kl_taylor_check(net, x, v, eps_list) -> np.ndarray:
    """|KL(f_theta || f_theta+eps v) - eps^2/2 v^T F v| for each eps."""
    v = np.asarray(v, dtype=np.float64)
    quad = float(v @ full_fisher(net, x) @ v)
    residuals = []
    for eps in eps_list:
        if eps == 0:
            residuals.append(0.0)
            continue
        kl = kl_between_networks(net, nn.perturb_params(net, v, eps), x)
        residuals.append(abs(kl - 0.5 * eps * eps * quad))
    return np.array(residuals)


def delta_v_fisher_full(net, x, v, fd_step: float = 1e-4, class_mode: str = TWO_CLASS) -> np.ndarray:
    """N x N matrix sum_S a^S (b^S)^T of theta-differenced input gradients."""
    x = np.asarray(x, dtype=np.float64)
    if x.size > MAX_INPUTS:
        raise SizeLimitError(f"N={x.size} exceeds the oracle limit {MAX_INPUTS}")
    groups, _ = _selectors(net, x, class_mode)
    shifted = nn.perturb_params(net, v, fd_step)
    M = np.zeros((x.size, x.size))
    for prob_sel, log_sel in groups:
        a = (nn.grad_input(shifted, x, prob_sel) - nn.grad_input(net, x, prob_sel)).reshape(-1) / fd_step
        b = (nn.grad_input(shifted, x, log_sel) - nn.grad_input(net, x, log_sel)).reshape(-1) / fd_step
        M += np.outer(a, b)
    return M


# -- ROC ----------------------------------------------------------------------------


def pairwise_auc(clean, adv) -> float:
    """Mann-Whitney AUC by comparing every (clean, adversarial) pair."""
    clean = np.asarray(clean, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    wins = ties = 0
    for a in adv:
        wins += int(np.sum(a > clean))
        ties += int(np.sum(a == clean))
    return (2 * wins + ties) / (2 * clean.size * adv.size)
