"""Differentiable feature-map operators used by the network graph."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import AXES, DimensionError, NumericError, Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# MAC accounting: ops report their cost to any active counter.

_counter_state = threading.local()


class MacCounter:
    def __init__(self):
        self.macs = 0
        self.elementwise = 0
        self.by_op: dict[str, int] = {}

    @property
    def total(self) -> int:
        return self.macs + self.elementwise

    def add(self, op: str, macs: int = 0, elementwise: int = 0) -> None:
        self.macs += int(macs)
        self.elementwise += int(elementwise)
        self.by_op[op] = self.by_op.get(op, 0) + int(macs) + int(elementwise)


@contextlib.contextmanager
def count_macs():
    prev = getattr(_counter_state, "counter", None)
    counter = MacCounter()
    _counter_state.counter = counter
    try:
        yield counter
    finally:
        _counter_state.counter = prev


def _charge(op: str, macs: int = 0, elementwise: int = 0) -> None:
    counter = getattr(_counter_state, "counter", None)
    if counter is not None:
        counter.add(op, macs, elementwise)


# ReLU sign patterns, collected while a probe is active (finite-difference kink detection)


@contextlib.contextmanager
def relu_patterns():
    prev = getattr(_counter_state, "patterns", None)
    patterns: list[np.ndarray] = []
    _counter_state.patterns = patterns
    try:
        yield patterns
    finally:
        _counter_state.patterns = prev


def _require_4d(x: Tensor, what: str = "input") -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{what} must be 4-D (n,c,h,w), got shape {x.shape}", axis="rank")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.kernel not in (1, 3):
            raise ValueError(f"kernel must be 1 or 3, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.groups not in (1, self.in_channels):
            raise ValueError("groups must be 1 (dense) or in_channels (depthwise)")
        if self.groups != 1 and self.in_channels != self.out_channels:
            raise ValueError("depthwise conv requires in_channels == out_channels == groups")

    @property
    def depthwise(self) -> bool:
        return self.groups != 1

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return -(-h // self.stride), -(-w // self.stride)


def _tap_slices(spec: ConvSpec, oh: int, ow: int):
    s, d = spec.stride, spec.dilation
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            yield i, j, (slice(i * d, i * d + s * (oh - 1) + 1, s),
                         slice(j * d, j * d + s * (ow - 1) + 1, s))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with "same" zero padding (``pad = dilation*(k-1)/2``)."""
    _require_4d(x)
    n, c, h, wd = x.shape
    if c != spec.in_channels:
        raise DimensionError(f"conv2d expects {spec.in_channels} input channels, got {c}", axis="channel")
    if w.shape != spec.weight_shape:
        raise DimensionError(f"conv2d weight shape {w.shape} != {spec.weight_shape}", axis="weight")
    if spec.has_bias and (b is None or b.shape != (spec.out_channels,)):
        raise DimensionError("conv2d bias must have shape (out_channels,)", axis="bias")
    if not spec.has_bias and b is not None:
        raise DimensionError("conv2d got a bias but spec.has_bias is False", axis="bias")

    oh, ow = spec.out_hw(h, wd)
    k, p = spec.kernel, spec.padding
    xd = x.data
    dw = spec.depthwise

    if k == 1 and spec.stride == 1 and not dw:
        cols = xd.reshape(n, c, h * wd)
        out = np.matmul(w.data.reshape(spec.out_channels, c), cols).reshape(n, -1, oh, ow)
        xp = None
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
        if dw:
            wk = w.data[:, 0]
            out = np.zeros((n, c, oh, ow), dtype=xd.dtype)
            for i, j, (sh, sw) in _tap_slices(spec, oh, ow):
                out += xp[:, :, sh, sw] * wk[:, i, j][None, :, None, None]
            cols = None
        else:
            cols = np.empty((n, c, k * k, oh, ow), dtype=xd.dtype)
            for i, j, (sh, sw) in _tap_slices(spec, oh, ow):
                cols[:, :, i * k + j] = xp[:, :, sh, sw]
            cols = cols.reshape(n, c * k * k, oh * ow)
            out = np.matmul(w.data.reshape(spec.out_channels, -1), cols).reshape(n, -1, oh, ow)
    if b is not None:
        out = out + b.data[None, :, None, None]

    _charge("conv2d", macs=n * spec.out_channels * (c // spec.groups) * k * k * oh * ow)

    def bw(g):
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        if dw:
            wk = w.data[:, 0]
            gw = np.zeros_like(w.data)
            gxp = np.zeros_like(xp)
            for i, j, (sh, sw) in _tap_slices(spec, oh, ow):
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, sh, sw])
                gxp[:, :, sh, sw] += g * wk[:, i, j][None, :, None, None]
        else:
            g2 = g.reshape(n, spec.out_channels, oh * ow)
            wm = w.data.reshape(spec.out_channels, -1)
            gw = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape)
            gcols = np.matmul(wm.T, g2)
            if xp is None:
                return gcols.reshape(x.shape), gw, gb
            gcols = gcols.reshape(n, c, k * k, oh, ow)
            gxp = np.zeros_like(xp)
            for i, j, (sh, sw) in _tap_slices(spec, oh, ow):
                gxp[:, :, sh, sw] += gcols[:, :, i * k + j]
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw)


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
               mode: str = "eval", momentum: float = BN_MOMENTUM, epsilon: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In ``train`` mode batch statistics are used and the running buffers are
    updated in place by an exponential moving average of the batch mean and
    (biased) batch variance.
    """
    _require_4d(x)
    n, c, h, w = x.shape
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                    ("running_var", running_var)):
        if t.shape != (c,):
            raise DimensionError(f"batch_norm {name} must have shape ({c},), got {t.shape}", axis="channel")
    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    elif mode == "eval":
        mu, var = running_mean.data, running_var.data
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    denom = var + epsilon
    if np.any(denom <= 0):
        raise NumericError("batch_norm variance + epsilon is not positive")
    inv = 1.0 / np.sqrt(denom)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    _charge("batch_norm", elementwise=out.size)

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        scale = (gamma.data * inv)[None, :, None, None]
        if mode == "train":
            m = n * h * w
            gx = scale * (g - (gbeta / m)[None, :, None, None] - xhat * (gg / m)[None, :, None, None])
        else:
            gx = scale * g
        return gx, gg, gbeta, None, None

    return record(out, (x, gamma, beta, running_mean, running_var), bw)


def relu(x: Tensor) -> Tensor:
    _require_4d(x)
    out = np.maximum(x.data, 0)
    patterns = getattr(_counter_state, "patterns", None)
    if patterns is not None:
        patterns.append(x.data > 0)
    _charge("relu", elementwise=out.size)
    return record(out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    _require_4d(x)
    xd = x.data
    # split branches so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    _charge("sigmoid", elementwise=out.size)
    return record(out, (x,), lambda g: (g * out * (1 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# structural ops


def elementwise_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """``a (*|+) b`` for equal shapes or a per-channel ``(n,c,1,1)`` right operand."""
    _require_4d(a, "left operand")
    _require_4d(b, "right operand")
    if a.shape != b.shape:
        n, c = a.shape[:2]
        if b.shape != (n, c, 1, 1):
            axis = next(name for name, sa, sb in zip(AXES, a.shape, b.shape) if sa != sb)
            raise DimensionError(f"cannot combine {a.shape} with {b.shape}", axis=axis)
    if kind == "mul":
        out = a * b
    elif kind == "add":
        out = a + b
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    _charge(kind, elementwise=a.size)
    return out


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise DimensionError("concat_channels needs at least one input", axis="channel")
    for t in xs:
        _require_4d(t)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        for axis, ref, got in (("n", n, t.shape[0]), ("h", h, t.shape[2]), ("w", w, t.shape[3])):
            if ref != got:
                raise DimensionError(f"concat_channels mismatch on {axis}: {ref} vs {got}", axis=axis)
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return record(out, tuple(xs), bw)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the bilinear weights for output sample i (half-pixel centers)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


_interp_cache: dict[tuple, np.ndarray] = {}


def interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _interp_cache.get(key)
    if m is None:
        m = _interp_matrix(n_in, n_out, dtype)
        m.setflags(write=False)
        _interp_cache[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling, align-corners off, edge samples clamped."""
    _require_4d(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size must be >= 1, got {(out_h, out_w)}", axis="h" if out_h < 1 else "w")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    _charge("bilinear_resize", elementwise=out.size)
    return record(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x)
    out = x.data.mean(axis=(2, 3), keepdims=True)
    hw = x.shape[2] * x.shape[3]
    _charge("global_avg_pool", elementwise=x.size)
    return record(out, (x,), lambda g: (np.broadcast_to(g / hw, x.shape).copy(),))


def fully_connected(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """``y = W x + b`` applied to an ``(n, c, 1, 1)`` vector batch."""
    _require_4d(x)
    n, c, h, wd = x.shape
    if (h, wd) != (1, 1):
        raise DimensionError(f"fully_connected expects (n,c,1,1), got {x.shape}", axis="h")
    if w.data.ndim != 2 or w.shape[1] != c:
        raise DimensionError(f"fully_connected weight {w.shape} does not match {c} inputs", axis="channel")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError("fully_connected bias must have shape (out,)", axis="bias")
    xv = x.data.reshape(n, c)
    out = xv @ w.data.T
    if b is not None:
        out = out + b.data
    _charge("fully_connected", macs=n * w.shape[0] * c)

    def bw(g):
        g2 = g.reshape(n, -1)
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ xv
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return record(out.reshape(n, -1, 1, 1), inputs, bw)


def window_filter(x: Tensor, kh: np.ndarray, kw: np.ndarray) -> Tensor:
    """Valid (unpadded) separable correlation with fixed 1-D kernels ``kh`` and ``kw``."""
    _require_4d(x)
    n, c, h, w = x.shape
    oh, ow = h - len(kh) + 1, w - len(kw) + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"window {len(kh)}x{len(kw)} larger than map {h}x{w}", axis="h" if oh < 1 else "w")
    # banded matrices: out = Bh @ x @ Bw^T
    bh = np.zeros((oh, h), dtype=x.dtype)
    for i in range(oh):
        bh[i, i:i + len(kh)] = kh
    bw_ = np.zeros((ow, w), dtype=x.dtype)
    for j in range(ow):
        bw_[j, j:j + len(kw)] = kw
    out = np.matmul(np.matmul(bh, x.data), bw_.T)
    return record(out, (x,), lambda g: (np.matmul(np.matmul(bh.T, g), bw_),))


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (non-differentiable; for masks)."""
    h, w = arr.shape[-2:]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return arr[..., rows[:, None], cols[None, :]]


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a plain ``(..., h, w)`` array, same convention as :func:`bilinear_resize`."""
    h, w = arr.shape[-2:]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ah = interp_matrix(h, out_h, arr.dtype)
    aw = interp_matrix(w, out_w, arr.dtype)
    return np.matmul(np.matmul(ah, arr), aw.T)


__all__ = [
    "ConvSpec", "MacCounter", "count_macs", "conv2d", "batch_norm", "relu", "sigmoid", "activation",
    "elementwise_binary", "concat_channels", "bilinear_resize", "global_avg_pool", "fully_connected",
    "window_filter", "nearest_resize", "resize_array", "as_tensor",
]
