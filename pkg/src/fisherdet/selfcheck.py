"""Oracle self-checks on seeded tiny networks.

Each check compares a fast-path quantity against its brute-force reference
and returns a :class:`CheckResult`. ``run_selfcheck(corrupt_gradient=True)``
scales every fast-path parameter gradient by a small factor so the suite
can be seen to fail.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import evaluation, fisher, nn, oracle

_TINY_ARCHS = ([2, 3, 2], [3, 4, 3], [4, 5, 3], [2, 6, 4], [5, 4, 4, 3])


def tiny_network(seed: int) -> tuple[nn.Network, np.ndarray]:
    """Seeded tiny MLP with N(0,1) weights and biases, plus an input in [0,1]."""
    rng = np.random.default_rng(seed)
    sizes = _TINY_ARCHS[seed % len(_TINY_ARCHS)]
    net = nn.mlp(sizes, seed)
    net = net.with_params(rng.normal(0.0, 1.0, net.num_params))
    return net, rng.random(sizes[0])


def tiny_cnn(seed: int) -> tuple[nn.Network, np.ndarray]:
    rng = np.random.default_rng(seed)
    layers = [nn.Conv2D(1, 2, 2), nn.ReLU(), nn.MaxPool2D(2, 2), nn.Flatten(),
              nn.Dense(2 * 2 * 2, 3), nn.Softmax()]
    net = nn.Network(layers, (1, 5, 5))
    net = net.with_params(rng.normal(0.0, 1.0, net.num_params))
    return net, rng.random((1, 5, 5))


def fixtures(count: int = 10, seed: int = 0):
    return [tiny_network(seed + i) for i in range(count)]


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst={self.worst:.3e} tol={self.tolerance:.1e} {self.detail}".rstrip()


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)


def check_gradients(nets, tol=1e-6, step=1e-6, floor=1e-8) -> CheckResult:
    worst = 0.0
    for net, x in nets:
        for sel in (nn.log_prob(0), nn.prob(1), nn.nll(net.num_classes - 1)):
            for fast, slow in ((nn.grad_params(net, x, sel), oracle.fd_grad_params(net, x, sel, step)),
                               (nn.grad_input(net, x, sel), oracle.fd_grad_input(net, x, sel, step))):
                mask = np.maximum(np.abs(fast), np.abs(slow)) > floor
                if mask.any():
                    worst = max(worst, float(rel_err(fast[mask], slow[mask]).max()))
    return CheckResult("gradients vs central differences", worst <= tol, worst, tol)


def check_trace(nets, tol=1e-10) -> CheckResult:
    worst = 0.0
    for net, x in nets:
        for mode in (fisher.FULL, fisher.TWO_CLASS):
            cfg = fisher.ScoreConfig(class_mode=mode, derivative_mode=fisher.BACKPROP)
            worst = max(worst, abs(np.trace(oracle.full_fisher(net, x, mode)) - fisher.fisher_trace(net, x, cfg)))
    return CheckResult("fisher_trace == trace(full_fisher)", worst <= tol, worst, tol)


def check_form(nets, tol=1e-10, n_dirs=20, seed=1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for net, x in nets:
        for mode in (fisher.FULL, fisher.TWO_CLASS):
            cfg = fisher.ScoreConfig(class_mode=mode, derivative_mode=fisher.BACKPROP)
            F = oracle.full_fisher(net, x, mode)
            for _ in range(n_dirs):
                v = rng.normal(size=net.num_params)
                worst = max(worst, abs(v @ F @ v - fisher.fisher_form(net, x, v, cfg)))
    return CheckResult("fisher_form == v^T F v", worst <= tol, worst, tol)


def check_fis(nets, tol=1e-3, fd_step=1e-4) -> CheckResult:
    worst = 0.0
    for net, x in nets:
        for mode in (fisher.FULL, fisher.TWO_CLASS):
            cfg = fisher.ScoreConfig(class_mode=mode, fd_step=fd_step, lam=1.0)
            v = fisher.direction_v(net, x, cfg, normalized=True)
            fmap = fisher.fis(net, x, v, cfg)
            diag = np.diag(oracle.delta_v_fisher_full(net, x, v.v, fd_step, mode))
            worst = max(worst, float(rel_err(fmap.values.reshape(-1), diag).max()))
    return CheckResult("fis == diag(delta_v F)", worst <= tol, worst, tol)


def check_kl_taylor(nets, band=(6.0, 10.0), seed=2) -> CheckResult:
    rng = np.random.default_rng(seed)
    ratios = []
    for net, x in nets:
        v = rng.normal(size=net.num_params)
        r = oracle.kl_taylor_check(net, x, v, [1e-2, 5e-3])
        ratios.append(r[0] / r[1])
    lo, hi = min(ratios), max(ratios)
    off = max(band[0] - lo, hi - band[1], 0.0)
    return CheckResult("KL residual cubic order", off == 0.0, off, 0.0,
                       f"ratios in [{lo:.3f}, {hi:.3f}], band {band}")


def check_finite_difference(nets, tol=1e-3, fd_step=1e-4, lam=0.01) -> CheckResult:
    """Forward-difference vs backprop form along the score direction (raw and unit)."""
    worst = 0.0
    for net, x in nets:
        for mode in (fisher.FULL, fisher.TWO_CLASS):
            bp_cfg = fisher.ScoreConfig(class_mode=mode, derivative_mode=fisher.BACKPROP, lam=lam)
            fd_cfg = fisher.ScoreConfig(class_mode=mode, fd_step=fd_step, lam=lam)
            for normalized in (False, True):
                v = fisher.direction_v(net, x, bp_cfg, normalized=normalized)
                bp = fisher.fisher_form(net, x, v, bp_cfg)
                if abs(bp) <= 1e-10:
                    continue
                worst = max(worst, abs(fisher.fisher_form(net, x, v, fd_cfg) - bp) / abs(bp))
    return CheckResult("finite-difference fisher_form", worst <= tol, worst, tol)


def check_auc(n_sets=50, size=50, seed=4) -> CheckResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for k in range(n_sets):
        # rounding produces ties in some sets
        clean = rng.normal(0.0, 1.0, size)
        adv = rng.normal(0.5, 1.0, size)
        if k % 2:
            clean, adv = np.round(clean, 1), np.round(adv, 1)
        if evaluation.roc(clean, adv).auc != oracle.pairwise_auc(clean, adv):
            mismatches += 1
    fixed = evaluation.roc([0.1, 0.4], [0.3, 0.9]).auc
    ok = mismatches == 0 and fixed == 0.75
    return CheckResult("trapezoid AUC == pair-count AUC", ok, float(mismatches), 0.0,
                       f"fixed case={fixed}")


@contextlib.contextmanager
def corrupted_gradients(factor: float = 1.001):
    """Test hook: scale every fast-path parameter gradient by ``factor``."""
    original = nn._backprop

    def bad(*args, **kwargs):
        dparams, dinput = original(*args, **kwargs)
        return (None if dparams is None else dparams * factor), dinput

    nn._backprop = bad
    try:
        yield
    finally:
        nn._backprop = original


def run_selfcheck(corrupt_gradient: bool = False, count: int = 10, seed: int = 0) -> list[CheckResult]:
    nets = fixtures(count, seed)
    with corrupted_gradients() if corrupt_gradient else contextlib.nullcontext():
        started = time.perf_counter()
        results = [
            check_gradients(nets + [tiny_cnn(seed)]),
            check_trace(nets),
            check_form(nets),
            check_fis(nets),
            check_kl_taylor(nets),
            check_finite_difference(nets),
            check_auc(),
        ]
        results[-1].detail += f" (suite {time.perf_counter() - started:.1f}s)"
    return results
