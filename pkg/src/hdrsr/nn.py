"""NHWC tensor compute: layers with hand-written backward passes, a graph
container, Adam, and a finite-difference gradient checker.

Activations and parameters are float32; scalar loss reductions accumulate in
float64. Convolutions run as im2col plus BLAS, with a direct per-offset
reference path kept around to cross-check the packing. Backward caches hold
references to forward inputs, never copies, so graph memory stays flat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError, StateError

# When set, Network.forward/backward sweep every produced tensor for NaN/Inf
# and raise FloatingPointError at the first offending node.
CHECK_FINITE = False


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def _assert_finite(label: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{label}: non-finite values detected")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """He initialization: N(0, sqrt(2 / fan_in)), float32."""
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(np.float32)


# ---------------------------------------------------------------------------
# convolution geometry and packing


class ConvGeometry(NamedTuple):
    n: int
    h: int
    w: int
    c: int
    kernel: int
    stride: int
    out_h: int
    out_w: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int


def same_pads(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """SAME padding: out = ceil(size / stride), extra pixel goes to the end."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    beg = total // 2
    return out, beg, total - beg


def conv_geometry(shape: tuple[int, ...], kernel: int, stride: int) -> ConvGeometry:
    n, h, w, c = shape
    out_h, pt, pb = same_pads(h, kernel, stride)
    out_w, pl, pr = same_pads(w, kernel, stride)
    return ConvGeometry(n, h, w, c, kernel, stride, out_h, out_w, pt, pb, pl, pr)


def im2col(x: np.ndarray, geo: ConvGeometry) -> np.ndarray:
    """Gather k x k windows into rows: (n*out_h*out_w, kernel*kernel*c)."""
    k, s = geo.kernel, geo.stride
    xp = np.pad(
        x,
        ((0, 0), (geo.pad_top, geo.pad_bottom), (geo.pad_left, geo.pad_right), (0, 0)),
    )
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        (geo.n, geo.out_h, geo.out_w, k, k, geo.c),
        (s0, s1 * s, s2 * s, s1, s2, s3),
        writeable=False,
    )
    return win.reshape(geo.n * geo.out_h * geo.out_w, k * k * geo.c)


def col2im(cols: np.ndarray, geo: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back onto the input grid."""
    k, s = geo.kernel, geo.stride
    hp = geo.h + geo.pad_top + geo.pad_bottom
    wp = geo.w + geo.pad_left + geo.pad_right
    xp = np.zeros((geo.n, hp, wp, geo.c), dtype=cols.dtype)
    cols6 = cols.reshape(geo.n, geo.out_h, geo.out_w, k, k, geo.c)
    h_span = (geo.out_h - 1) * s + 1
    w_span = (geo.out_w - 1) * s + 1
    for kh in range(k):
        for kw in range(k):
            xp[:, kh : kh + h_span : s, kw : kw + w_span : s, :] += cols6[:, :, :, kh, kw, :]
    return xp[:, geo.pad_top : geo.pad_top + geo.h, geo.pad_left : geo.pad_left + geo.w, :]


def conv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, tuple]:
    """SAME-padded 2D convolution; returns (output, cache) for backward."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (N, H, W, C), got {x.shape}")
    k = w.shape[0]
    if w.ndim != 4 or w.shape[1] != k:
        raise ShapeError(f"conv kernel must be (k, k, Cin, Cout), got {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(
            f"input channels {x.shape[3]} do not match kernel Cin {w.shape[2]}"
        )
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    geo = conv_geometry(x.shape, k, stride)
    cols = im2col(x, geo)
    y = cols @ w.reshape(-1, w.shape[3]) + b
    y = y.reshape(geo.n, geo.out_h, geo.out_w, w.shape[3])
    return y, (x, w, geo)


def conv2d_backward(
    grad_out: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_input, d_kernel, d_bias) for :func:`conv2d_forward`."""
    x, w, geo = cache
    cout = w.shape[3]
    if grad_out.shape != (geo.n, geo.out_h, geo.out_w, cout):
        raise ShapeError(
            f"grad shape {grad_out.shape} does not match output "
            f"{(geo.n, geo.out_h, geo.out_w, cout)}"
        )
    g2 = grad_out.reshape(-1, cout)
    gb = g2.sum(axis=0)
    cols = im2col(x, geo)  # recomputed: cheaper than caching the packing
    gw = (cols.T @ g2).reshape(w.shape)
    gcols = g2 @ w.reshape(-1, cout).T
    gx = col2im(gcols, geo)
    return gx, gw, gb


def conv2d_forward_direct(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1
) -> np.ndarray:
    """Reference convolution: accumulate shifted matmuls per kernel offset.

    Slow path used to validate the im2col packing; both paths must agree.
    """
    k = w.shape[0]
    geo = conv_geometry(x.shape, k, stride)
    xp = np.pad(
        x,
        ((0, 0), (geo.pad_top, geo.pad_bottom), (geo.pad_left, geo.pad_right), (0, 0)),
    )
    out = np.zeros((geo.n, geo.out_h, geo.out_w, w.shape[3]), dtype=np.float32)
    h_span = (geo.out_h - 1) * stride + 1
    w_span = (geo.out_w - 1) * stride + 1
    for kh in range(k):
        for kw in range(k):
            patch = xp[:, kh : kh + h_span : stride, kw : kw + w_span : stride, :]
            out += patch @ w[kh, kw]
    return out + b


def tconv2d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, tuple]:
    """4x4 stride-2 transposed convolution doubling H and W.

    Defined as the exact adjoint of the 4x4 stride-2 padding-1 convolution
    that halves a (2H, 2W) grid, with the kernel's channel axes swapped.
    Output pixel coverage is what col2im scatters from x @ W^T.
    """
    if x.ndim != 4:
        raise ShapeError(f"tconv input must be (N, H, W, C), got {x.shape}")
    if w.ndim != 4 or w.shape[:2] != (4, 4):
        raise ShapeError(f"tconv kernel must be (4, 4, Cin, Cout), got {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ShapeError(
            f"input channels {x.shape[3]} do not match kernel Cin {w.shape[2]}"
        )
    n, h, w_, cin = x.shape
    cout = w.shape[3]
    # Adjoint geometry: conv(k=4, s=2) over (2H, 2W) with SAME pads (1, 1).
    geo = conv_geometry((n, 2 * h, 2 * w_, cout), 4, 2)
    wr = w.transpose(0, 1, 3, 2).reshape(-1, cin)  # (16*cout, cin)
    cols = x.reshape(-1, cin) @ wr.T
    y = col2im(cols, geo) + b
    return y, (x, w, geo)


def tconv2d_backward(
    grad_out: np.ndarray, cache: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_input, d_kernel, d_bias) for :func:`tconv2d_forward`."""
    x, w, geo = cache
    n, h, w_, cin = x.shape
    cout = w.shape[3]
    if grad_out.shape != (n, 2 * h, 2 * w_, cout):
        raise ShapeError(
            f"grad shape {grad_out.shape} does not match output "
            f"{(n, 2 * h, 2 * w_, cout)}"
        )
    gb = grad_out.sum(axis=(0, 1, 2))
    gcols = im2col(grad_out, geo)  # adjoint of the forward col2im
    wr = w.transpose(0, 1, 3, 2).reshape(-1, cin)
    gx = (gcols @ wr).reshape(x.shape)
    g_wr = gcols.T @ x.reshape(-1, cin)  # (16*cout, cin)
    gw = g_wr.reshape(4, 4, cout, cin).transpose(0, 1, 3, 2)
    return gx, gw, gb


def pixel_shuffle(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Rearrange (N, H, W, C*r*r) to (N, rH, rW, C).

    out[n, r*y + dy, r*x + dx, c] = in[n, y, x, c*r*r + dy*r + dx].
    """
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle input must be rank 4, got {x.shape}")
    n, h, w, c = x.shape
    r = factor
    if c % (r * r) != 0:
        raise ShapeError(f"channels {c} not divisible by {r * r}")
    cout = c // (r * r)
    t = x.reshape(n, h, w, cout, r, r).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(t.reshape(n, h * r, w * r, cout))


def pixel_unshuffle(y: np.ndarray, factor: int = 2) -> np.ndarray:
    """Exact inverse (and adjoint) of :func:`pixel_shuffle`."""
    if y.ndim != 4:
        raise ShapeError(f"pixel_unshuffle input must be rank 4, got {y.shape}")
    n, hr, wr, cout = y.shape
    r = factor
    if hr % r != 0 or wr % r != 0:
        raise ShapeError(f"spatial dims {(hr, wr)} not divisible by {r}")
    t = y.reshape(n, hr // r, r, wr // r, r, cout).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(t.reshape(n, hr // r, wr // r, cout * r * r))


# ---------------------------------------------------------------------------
# layers


class Layer:
    """One differentiable op; forward caches references for its own backward."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Conv2d(Layer):
    def __init__(self, cin: int, cout: int, stride: int = 1, *, rng: np.random.Generator):
        super().__init__()
        if stride not in (1, 2):
            raise ParameterError(f"stride must be 1 or 2, got {stride}")
        self.stride = stride
        self.params = {
            "w": he_normal(rng, (3, 3, cin, cout), fan_in=9 * cin),
            "b": np.zeros(cout, dtype=np.float32),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x):
        y, self._cache = conv2d_forward(_f32(x), self.params["w"], self.params["b"], self.stride)
        return y

    def backward(self, grad_out):
        gx, gw, gb = conv2d_backward(_f32(grad_out), self._take_cache())
        self.grads["w"] += gw
        self.grads["b"] += gb
        return gx


class TransposedConv2d(Layer):
    """4x4 stride-2 upsampling convolution."""

    def __init__(self, cin: int, cout: int, *, rng: np.random.Generator):
        super().__init__()
        self.params = {
            "w": he_normal(rng, (4, 4, cin, cout), fan_in=16 * cin),
            "b": np.zeros(cout, dtype=np.float32),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x):
        y, self._cache = tconv2d_forward(_f32(x), self.params["w"], self.params["b"])
        return y

    def backward(self, grad_out):
        gx, gw, gb = tconv2d_backward(_f32(grad_out), self._take_cache())
        self.grads["w"] += gw
        self.grads["b"] += gb
        return gx


class Dense(Layer):
    def __init__(self, cin: int, cout: int, *, rng: np.random.Generator):
        super().__init__()
        self.params = {
            "w": he_normal(rng, (cin, cout), fan_in=cin),
            "b": np.zeros(cout, dtype=np.float32),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x):
        x = _f32(x)
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.params["w"].shape[0]:
            raise ShapeError(
                f"dense input width {flat.shape[1]} does not match "
                f"{self.params['w'].shape[0]}"
            )
        self._cache = (flat, x.shape)
        return flat @ self.params["w"] + self.params["b"]

    def backward(self, grad_out):
        flat, in_shape = self._take_cache()
        g = _f32(grad_out)
        self.grads["w"] += flat.T @ g
        self.grads["b"] += g.sum(axis=0)
        return (g @ self.params["w"].T).reshape(in_shape)


class ReLU(Layer):
    def forward(self, x):
        x = _f32(x)
        self._cache = x > 0
        return np.where(self._cache, x, np.float32(0.0))

    def backward(self, grad_out):
        mask = self._take_cache()
        return np.where(mask, _f32(grad_out), np.float32(0.0))


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = np.float32(slope)

    def forward(self, x):
        x = _f32(x)
        self._cache = x >= 0
        return np.where(self._cache, x, self.slope * x)

    def backward(self, grad_out):
        mask = self._take_cache()
        g = _f32(grad_out)
        return np.where(mask, g, self.slope * g)


class Tanh(Layer):
    def forward(self, x):
        y = np.tanh(_f32(x))
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._take_cache()
        return _f32(grad_out) * (np.float32(1.0) - y * y)


class Sigmoid(Layer):
    def forward(self, x):
        x = _f32(x)
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        y[~pos] = ez / (1.0 + ez)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._take_cache()
        return _f32(grad_out) * y * (np.float32(1.0) - y)


class GlobalAvgPool(Layer):
    """(N, H, W, C) -> (N, 1, 1, C) spatial mean."""

    def forward(self, x):
        x = _f32(x)
        if x.ndim != 4:
            raise ShapeError(f"pool input must be rank 4, got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(1, 2), keepdims=True)

    def backward(self, grad_out):
        n, h, w, c = self._take_cache()
        g = _f32(grad_out).reshape(n, 1, 1, c) / np.float32(h * w)
        return np.broadcast_to(g, (n, h, w, c)).copy()


class Concat(Layer):
    """Channel-axis concatenation of two tensors with equal N, H, W."""

    def forward(self, a, b):
        a, b = _f32(a), _f32(b)
        if a.shape[:3] != b.shape[:3]:
            raise ShapeError(f"concat inputs disagree: {a.shape} vs {b.shape}")
        self._cache = a.shape[3]
        return np.concatenate([a, b], axis=3)

    def backward(self, grad_out):
        ca = self._take_cache()
        g = _f32(grad_out)
        return g[..., :ca], g[..., ca:]


class PixelShuffle(Layer):
    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        x = _f32(x)
        self._cache = x.shape
        return pixel_shuffle(x, self.factor)

    def backward(self, grad_out):
        self._take_cache()
        return pixel_unshuffle(_f32(grad_out), self.factor)


# ---------------------------------------------------------------------------
# loss and optimizer


def mae_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient with respect to ``pred``.

    The reduction runs in float64; the returned gradient is float32
    sign(pred - target) / n.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(np.abs(diff)))
    grad = (np.sign(diff) / diff.size).astype(np.float32)
    return loss, grad


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / c1
            vhat = v / c2
            p -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# graph container


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: tuple[str, ...] = ("input",)


class Network:
    """A linear list of named nodes forming a DAG over earlier outputs.

    Node inputs reference the reserved name "input" or any earlier node.
    Backward accumulates into each layer's ``grads``; callers zero them
    between steps.
    """

    INPUT = "input"

    def __init__(self, nodes: list[Node], meta: dict | None = None):
        seen = {self.INPUT}
        for node in nodes:
            if node.name in seen:
                raise ConfigError(f"duplicate or reserved node name {node.name!r}")
            for src in node.inputs:
                if src not in seen:
                    raise ConfigError(
                        f"node {node.name!r} references unknown input {src!r}"
                    )
            seen.add(node.name)
        if not nodes:
            raise ConfigError("network needs at least one node")
        self.nodes = list(nodes)
        self.meta = dict(meta or {})

    def forward(self, x: np.ndarray) -> np.ndarray:
        acts: dict[str, np.ndarray] = {self.INPUT: _f32(x)}
        for node in self.nodes:
            out = node.layer.forward(*(acts[src] for src in node.inputs))
            if CHECK_FINITE:
                _assert_finite(node.name, out)
            acts[node.name] = out
        return acts[self.nodes[-1].name]

    def backward(self, grad_out: np.ndarray) -> np.ndarray | None:
        pending: dict[str, np.ndarray] = {self.nodes[-1].name: _f32(grad_out)}
        for node in reversed(self.nodes):
            g = pending.pop(node.name, None)
            if g is None:
                continue  # not on a path to the output
            gin = node.layer.backward(g)
            if not isinstance(gin, tuple):
                gin = (gin,)
            if len(gin) != len(node.inputs):
                raise StateError(
                    f"node {node.name!r} returned {len(gin)} gradients "
                    f"for {len(node.inputs)} inputs"
                )
            for src, gi in zip(node.inputs, gin):
                if CHECK_FINITE:
                    _assert_finite(f"{node.name}->{src}", gi)
                if src in pending:
                    pending[src] = pending[src] + gi
                else:
                    pending[src] = gi
        return pending.get(self.INPUT)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{node.name}/{key}": arr
            for node in self.nodes
            for key, arr in node.layer.params.items()
        }

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            f"{node.name}/{key}": arr
            for node in self.nodes
            for key, arr in node.layer.grads.items()
        }

    def zero_gradients(self) -> None:
        for node in self.nodes:
            for arr in node.layer.grads.values():
                arr[...] = 0.0

    @property
    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.parameters().values())


# ---------------------------------------------------------------------------
# gradient checking


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def gradient_check(
    net: Network,
    x: np.ndarray,
    loss_fn: LossFn,
    rng: np.random.Generator,
    fraction: float = 0.01,
    min_coords: int = 100,
    step: float = 1e-3,
    include_input: bool = False,
) -> float:
    """Compare analytic and central-difference gradients on sampled coordinates.

    Per coordinate the error is |analytic - numeric| / max(|analytic|,
    |numeric|, 1): relative for large gradients, absolute below unit scale,
    which keeps float32 forward noise from inflating dead coordinates.
    Returns the maximum over the sample.
    """
    x = _f32(x)
    out = net.forward(x)
    _, grad_out = loss_fn(out)
    net.zero_gradients()
    grad_in = net.backward(grad_out)
    analytic = {k: v.copy() for k, v in net.gradients().items()}
    tensors: list[tuple[str, np.ndarray, np.ndarray]] = [
        (name, arr, analytic[name]) for name, arr in net.parameters().items()
    ]
    if include_input:
        if grad_in is None:
            raise StateError("network produced no input gradient")
        tensors.append(("input", x, grad_in))
    total = sum(arr.size for _, arr, _ in tensors)
    if total == 0:
        raise ParameterError("nothing to check: no parameters and include_input=False")
    n_sample = min(total, max(min_coords, int(math.ceil(fraction * total))))
    picks = np.sort(rng.choice(total, size=n_sample, replace=False))
    bounds = np.cumsum([arr.size for _, arr, _ in tensors])
    worst = 0.0
    h = np.float32(step)
    for gidx in picks:
        t = int(np.searchsorted(bounds, gidx, side="right"))
        off = int(gidx - (bounds[t - 1] if t > 0 else 0))
        _, arr, ana_arr = tensors[t]
        flat = arr.reshape(-1)
        old = flat[off]
        flat[off] = old + h
        loss_plus, _ = loss_fn(net.forward(x))
        flat[off] = old - h
        loss_minus, _ = loss_fn(net.forward(x))
        flat[off] = old
        numeric = (loss_plus - loss_minus) / (2.0 * float(h))
        ana = float(ana_arr.reshape(-1)[off])
        err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1.0)
        worst = max(worst, err)
    # restore layer caches to the unperturbed point
    net.forward(x)
    return worst
