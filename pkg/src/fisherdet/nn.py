"""
Small feed-forward network engine in float64 numpy.

Supported layers: dense, conv2d, relu, maxpool2d, flatten and a terminal
softmax. Every layer works on a leading batch axis. The backward pass can
return gradients w.r.t. the input, the flattened parameter vector, or
per-sample parameter gradients (one row per batch element), which is what
the Fisher computations need.

Parameter layout (row-major, in layer order):
    dense   W (in, out) then b (out,)
    conv2d  W (out_ch, in_ch, k, k) then b (out_ch,)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ArchitectureError,
    ClassIndexError,
    DimensionError,
    InputShapeError,
    NumericError,
)

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    kind = "dense"

    def param_shapes(self):
        return [("W", (self.in_features, self.out_features)), ("b", (self.out_features,))]

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ArchitectureError(f"dense expects ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def forward(self, x, params):
        W, b = params
        return x @ W + b, x

    def backward(self, dout, cache, params, per_sample, need_dx):
        W, _ = params
        x = cache
        if per_sample:
            dW = x[:, :, None] * dout[:, None, :]
            db = dout
        else:
            dW = x.T @ dout
            db = dout.sum(axis=0)
        dx = dout @ W.T if need_dx else None
        return dx, [dW, db]

    def to_dict(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    kind = "conv2d"

    def param_shapes(self):
        k = self.kernel_size
        return [("W", (self.out_channels, self.in_channels, k, k)), ("b", (self.out_channels,))]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ArchitectureError(
                f"conv2d expects ({self.in_channels}, H, W), got {tuple(shape)}")
        _, h, w = shape
        k, s = self.kernel_size, self.stride
        if h < k or w < k:
            raise ArchitectureError(f"conv2d kernel {k} larger than input {h}x{w}")
        return (self.out_channels, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x, params):
        W, b = params
        k, s = self.kernel_size, self.stride
        B, cin, h, w = x.shape
        # (B, cin, Ho, Wo, k, k)
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, ho * wo, cin * k * k)
        out = cols @ W.reshape(self.out_channels, -1).T + b
        out = out.reshape(B, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return out, (cols, x.shape)

    def backward(self, dout, cache, params, per_sample, need_dx):
        W, _ = params
        cols, xshape = cache
        B, cout, ho, wo = dout.shape
        k, s = self.kernel_size, self.stride
        D = dout.transpose(0, 2, 3, 1).reshape(B, ho * wo, cout)
        if per_sample:
            dW = np.matmul(D.transpose(0, 2, 1), cols).reshape((B,) + W.shape)
            db = D.sum(axis=1)
        else:
            dW = (D.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(W.shape)
            db = D.sum(axis=(0, 1))
        dx = None
        if need_dx:
            cin = xshape[1]
            dcols = (D @ W.reshape(cout, -1)).reshape(B, ho, wo, cin, k, k)
            dx = np.zeros(xshape, dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, [dW, db]

    def to_dict(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "stride": self.stride}


@dataclass(frozen=True)
class ReLU:
    kind = "relu"

    def param_shapes(self):
        return []

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache, params, per_sample, need_dx):
        return dout * cache, []

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class MaxPool2D:
    window: int = 2
    stride: int = 2
    kind = "maxpool2d"

    def param_shapes(self):
        return []

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ArchitectureError(f"maxpool2d expects (C, H, W), got {tuple(shape)}")
        c, h, w = shape
        k, s = self.window, self.stride
        if h < k or w < k:
            raise ArchitectureError(f"maxpool2d window {k} larger than input {h}x{w}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x, params):
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))
        # argmax picks the first maximum: deterministic tie-breaking
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, dout, cache, params, per_sample, need_dx):
        idx, xshape = cache
        k, s = self.window, self.stride
        ho, wo = dout.shape[2], dout.shape[3]
        dx = np.zeros(xshape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dout * (idx == i * k + j)
        return dx, []

    def to_dict(self):
        return {"kind": self.kind, "window": self.window, "stride": self.stride}


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"

    def param_shapes(self):
        return []

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, params):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache, params, per_sample, need_dx):
        return dout.reshape(cache), []

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"

    def param_shapes(self):
        return []

    def output_shape(self, shape):
        if len(shape) != 1:
            raise ArchitectureError(f"softmax expects a vector, got {tuple(shape)}")
        return tuple(shape)

    def to_dict(self):
        return {"kind": self.kind}


_LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool2D, Flatten, Softmax)}


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _LAYER_TYPES:
        raise ArchitectureError(f"unknown layer kind {kind!r}")
    return _LAYER_TYPES[kind](**d)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class ParamSlot(NamedTuple):
    layer: int
    name: str
    offset: int
    shape: tuple


class Network:
    """Layered classifier with an immutable flattened parameter vector.

    The last layer must be the (only) Softmax. ``params`` is stored as a
    read-only float64 copy; use :meth:`with_params` to derive a new network.
    """

    def __init__(self, layers: Sequence, input_shape: Sequence[int], params=None):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(n) for n in input_shape)
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ArchitectureError("network must end with a softmax layer")
        if sum(isinstance(layer, Softmax) for layer in self.layers) != 1:
            raise ArchitectureError("exactly one softmax layer is allowed")
        if any(n <= 0 for n in self.input_shape):
            raise ArchitectureError("input dimensions must be positive")

        layout, shapes, offset = [], [self.input_shape], 0
        for li, layer in enumerate(self.layers):
            for name, shape in layer.param_shapes():
                layout.append(ParamSlot(li, name, offset, tuple(shape)))
                offset += int(np.prod(shape))
            shapes.append(layer.output_shape(shapes[-1]))
        self.layout = tuple(layout)
        self.shapes = tuple(shapes)
        self.num_params = offset
        self.num_classes = shapes[-1][0]

        if params is None:
            params = np.zeros(self.num_params)
        params = np.array(params, dtype=DTYPE).reshape(-1)
        if params.size != self.num_params:
            raise DimensionError(f"expected {self.num_params} parameters, got {params.size}")
        params.setflags(write=False)
        self.params = params

    def __repr__(self):
        kinds = ",".join(layer.kind for layer in self.layers)
        return f"Network({kinds}; input={self.input_shape}, p={self.num_params}, C={self.num_classes})"

    def with_params(self, params) -> "Network":
        return Network(self.layers, self.input_shape, params)

    def layer_params(self, params=None):
        """Views into ``params`` grouped per layer, in layout order."""
        params = self.params if params is None else params
        grouped = [[] for _ in self.layers]
        for slot in self.layout:
            size = int(np.prod(slot.shape))
            grouped[slot.layer].append(params[slot.offset:slot.offset + size].reshape(slot.shape))
        return grouped

    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [layer.to_dict() for layer in self.layers]}

    def offset_table(self) -> list:
        return [{"layer": s.layer, "name": s.name, "offset": s.offset, "shape": list(s.shape)}
                for s in self.layout]


def init_params(layers, input_shape, seed: int = 0) -> Network:
    """He-normal weights, zero biases."""
    net = Network(layers, input_shape)
    rng = np.random.default_rng(seed)
    params = np.zeros(net.num_params)
    for slot in net.layout:
        size = int(np.prod(slot.shape))
        if slot.name == "W":
            fan_in = int(np.prod(slot.shape[1:])) if len(slot.shape) == 4 else slot.shape[0]
            params[slot.offset:slot.offset + size] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size)
    return net.with_params(params)


def mlp(sizes: Sequence[int], seed: int = 0) -> Network:
    """Dense/ReLU stack, e.g. ``mlp([2, 3, 2])``."""
    if len(sizes) < 2:
        raise ArchitectureError("mlp needs at least input and output sizes")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    layers.append(Softmax())
    return init_params(layers, (sizes[0],), seed)


def mnist_cnn(seed: int = 0) -> Network:
    """Reference MNIST architecture: two conv/pool stages and a dense head."""
    layers = [
        Conv2D(1, 8, 3), ReLU(), MaxPool2D(2, 2),
        Conv2D(8, 16, 3), ReLU(), MaxPool2D(2, 2),
        Flatten(), Dense(16 * 5 * 5, 64), ReLU(), Dense(64, 10), Softmax(),
    ]
    return init_params(layers, (1, 28, 28), seed)


def build_architecture(name: str, seed: int = 0) -> Network:
    """Parse ``mnist-cnn`` or ``mlp:784-128-10``."""
    if name == "mnist-cnn":
        return mnist_cnn(seed)
    if name.startswith("mlp:"):
        try:
            sizes = [int(n) for n in name[4:].split("-")]
        except ValueError:
            raise ArchitectureError(f"bad mlp architecture {name!r}") from None
        return mlp(sizes, seed)
    raise ArchitectureError(f"unknown architecture {name!r}")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _as_batch(net: Network, X) -> np.ndarray:
    X = np.asarray(X, dtype=DTYPE)
    if X.shape[1:] != net.input_shape:
        raise InputShapeError(f"expected inputs of shape {net.input_shape}, got {X.shape[1:]}")
    return X


def _check_single(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != net.input_shape:
        raise InputShapeError(f"expected input of shape {net.input_shape}, got {x.shape}")
    return x


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def _run(net: Network, X, params=None):
    """Logits plus per-layer caches for a batch."""
    weights = net.layer_params(params)
    caches = []
    h = X
    for layer, w in zip(net.layers[:-1], weights[:-1]):
        h, cache = layer.forward(h, w)
        caches.append(cache)
    return _finite(h, "logits"), caches


def _backprop(net: Network, caches, dlogits, *, params=None, want_params=True,
              want_input=False, per_sample=False):
    """Pull ``dlogits`` (B, C) back through the network.

    Returns ``(dparams, dinput)``; dparams has shape (p,) summed over the
    batch, or (B, p) when ``per_sample`` is set.
    """
    weights = net.layer_params(params)
    B = dlogits.shape[0]
    grads = [None] * len(net.layers)
    d = dlogits
    n_hidden = len(net.layers) - 1
    first_param_layer = min((s.layer for s in net.layout), default=n_hidden)
    for li in range(n_hidden - 1, -1, -1):
        if not want_input and li < first_param_layer:
            break
        need_dx = want_input or li > first_param_layer
        d, grads[li] = net.layers[li].backward(d, caches[li], weights[li], per_sample, need_dx)

    dparams = None
    if want_params:
        shape = (B, net.num_params) if per_sample else (net.num_params,)
        dparams = np.zeros(shape, dtype=DTYPE)
        counters = [0] * len(net.layers)
        for slot in net.layout:
            g = grads[slot.layer][counters[slot.layer]]
            counters[slot.layer] += 1
            size = int(np.prod(slot.shape))
            if per_sample:
                dparams[:, slot.offset:slot.offset + size] = g.reshape(B, size)
            else:
                dparams[slot.offset:slot.offset + size] = g.reshape(size)
        _finite(dparams, "parameter gradient")
    dinput = _finite(d, "input gradient") if want_input else None
    return dparams, dinput


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1)
    return m + np.log(np.exp(z - m[..., None]).sum(axis=-1))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def logits_batch(net: Network, X) -> np.ndarray:
    return _run(net, _as_batch(net, X))[0]


def forward_batch(net: Network, X) -> np.ndarray:
    """Class probabilities for a batch, shape (B, C)."""
    return softmax(logits_batch(net, X))


def forward(net: Network, x) -> np.ndarray:
    """Class probabilities for a single input."""
    x = _check_single(net, x)
    return forward_batch(net, x[None])[0]


def predict_batch(net: Network, X, batch_size: int = 500) -> np.ndarray:
    """Argmax class per input; ties go to the lowest index."""
    X = _as_batch(net, X)
    out = [logits_batch(net, X[i:i + batch_size]).argmax(axis=1)
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# Scalar selectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Selector:
    """A scalar function of the softmax output.

    Every selector is either ``g_S`` or ``log g_S`` for a class group S,
    where g_S is the total probability of S. ``nll`` is ``-log f^y``.
    """

    kind: str
    cls: int | None = None

    KINDS = ("prob", "log_prob", "nll", "log_total", "rest_prob", "rest_log_prob")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown selector kind {self.kind!r}")

    def mask(self, num_classes: int) -> np.ndarray:
        if self.kind == "log_total":
            return np.ones(num_classes, dtype=bool)
        if self.cls is None or not 0 <= self.cls < num_classes:
            raise ClassIndexError(f"class index {self.cls} out of range for C={num_classes}")
        m = np.zeros(num_classes, dtype=bool)
        m[self.cls] = True
        return ~m if self.kind.startswith("rest") else m

    @property
    def is_log(self) -> bool:
        return self.kind in ("log_prob", "nll", "log_total", "rest_log_prob")


def prob(c: int) -> Selector:
    return Selector("prob", c)


def log_prob(c: int) -> Selector:
    return Selector("log_prob", c)


def nll(y: int) -> Selector:
    return Selector("nll", y)


def log_total() -> Selector:
    return Selector("log_total")


def rest_prob(c: int) -> Selector:
    """Probability of "not c", the second entry of the two-class reduction."""
    return Selector("rest_prob", c)


def rest_log_prob(c: int) -> Selector:
    return Selector("rest_log_prob", c)


def group_log_prob_grad(z: np.ndarray, mask: np.ndarray):
    """``log g_S`` and its logit gradient ``softmax_S(z) - softmax(z)``.

    Both are evaluated in log-space so ``g_S`` close to 0 or 1 stays exact.
    """
    f = softmax(z)
    zs = np.where(mask, z, -np.inf)
    log_g = _logsumexp(zs) - _logsumexp(z)
    return log_g, np.exp(zs - _logsumexp(zs)[..., None]) - f


def selector_value_and_dlogits(sel: Selector, z: np.ndarray):
    """Value of ``sel`` at logits ``z`` (B, C) and its gradient w.r.t. ``z``."""
    mask = sel.mask(z.shape[-1])
    log_g, dlog = group_log_prob_grad(z, mask)
    if sel.kind == "log_total":
        return np.zeros_like(log_g), np.zeros_like(dlog)
    if sel.kind == "nll":
        return -log_g, -dlog
    if sel.is_log:
        return log_g, dlog
    g = np.exp(log_g)
    return g, g[..., None] * dlog


def selector_value(net: Network, x, sel: Selector) -> float:
    x = _check_single(net, x)
    z, _ = _run(net, x[None])
    return float(selector_value_and_dlogits(sel, z)[0][0])


def grad_params(net: Network, x, sel: Selector) -> np.ndarray:
    """Gradient of the selected scalar w.r.t. the flattened parameters."""
    x = _check_single(net, x)
    z, caches = _run(net, x[None])
    _, dz = selector_value_and_dlogits(sel, z)
    return _backprop(net, caches, dz)[0]


def grad_input(net: Network, x, sel: Selector) -> np.ndarray:
    """Gradient of the selected scalar w.r.t. the input, shaped like ``x``."""
    x = _check_single(net, x)
    z, caches = _run(net, x[None])
    _, dz = selector_value_and_dlogits(sel, z)
    return _backprop(net, caches, dz, want_params=False, want_input=True)[1][0]


def perturb_params(net: Network, v, eps: float) -> Network:
    """Copy of ``net`` with parameters ``theta + eps * v``."""
    v = np.asarray(v, dtype=DTYPE).reshape(-1)
    if v.size != net.num_params:
        raise DimensionError(f"direction has length {v.size}, network has p={net.num_params}")
    if eps == 0:
        return net.with_params(net.params)
    return net.with_params(net.params + eps * v)
