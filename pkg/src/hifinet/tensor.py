"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every op is a pure function of its inputs.  When a :class:`GradTape` is
active and an input requires gradients, the op appends one record to the
tape; records are appended in creation order, which is already a valid
topological order, so the backward sweep simply walks the tape in reverse.
"""
from __future__ import annotations

import threading
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ConfigError",
    "Tensor",
    "ConvParams",
    "GradTape",
    "backward",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "relu",
    "sigmoid",
    "exp",
    "sqrt",
    "absolute",
    "add",
    "sub",
    "mul",
    "div",
    "concat_channels",
    "slice_channels",
    "upsample_nearest",
    "subsample",
    "gaussian_blur",
    "sum_all",
    "mean_all",
]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


class ConfigError(ValueError):
    """Raised for invalid op configuration (e.g. an even kernel size)."""


class Tensor:
    """An immutable array value that may take part in differentiation."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)


class ConvParams:
    """Weight ``(out_ch, in_ch, k, k)`` and bias ``(out_ch,)`` of one convolution."""

    __slots__ = ("weight", "bias")

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"conv weight must be (out, in, k, k), got {weight.shape}")
        if weight.shape[2] % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {weight.shape[2]}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        self.weight = weight
        self.bias = bias

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


# ---------------------------------------------------------------------------
# tape

_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Records differentiable ops executed inside its ``with`` block.

    One tape per training step; a tape is not meant to be shared between
    threads.  Ops run outside any tape produce plain values.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        self._records.append((out, inputs, vjp))

    def gradient(self, loss: Tensor, sources):
        """Return d(loss)/d(source) for each source.

        ``sources`` may be a mapping (a dict of gradients keyed the same way
        is returned) or a sequence (a list is returned).  Sources the loss
        does not depend on receive zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        def lookup(t: Tensor) -> np.ndarray:
            g = grads.get(id(t))
            if g is None:
                return np.zeros_like(t.data)
            return np.asarray(g, dtype=t.dtype).reshape(t.shape)

        if isinstance(sources, Mapping):
            return {k: lookup(t) for k, t in sources.items()}
        return [lookup(t) for t in sources]


def backward(loss: Tensor, tape: GradTape, sources):
    """Gradients of a scalar ``loss`` recorded on ``tape`` w.r.t. ``sources``."""
    return tape.gradient(loss, sources)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, vjp)
        return out
    return Tensor(data)


def _check4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a 4D (n, c, h, w) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution and pooling


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, params: ConvParams, activation: str = "none") -> Tensor:
    """Stride-1 convolution with zero "same" padding, optionally followed by ReLU."""
    _check4d(x, "conv2d")
    if activation not in ("none", "relu"):
        raise ConfigError(f"unknown activation {activation!r}")
    w, b = params.weight, params.bias
    n, c, h, wd = x.shape
    out_ch, in_ch, k, _ = w.shape
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {in_ch}")
    p = (k - 1) // 2
    wm = w.data.reshape(out_ch, in_ch * k * k)
    if k == 1:
        cols = x.data.transpose(1, 0, 2, 3).reshape(in_ch, n * h * wd)
    else:
        win = sliding_window_view(_pad_hw(x.data, p), (k, k), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(in_ch * k * k, n * h * wd)
    y = wm @ cols
    y += b.data[:, None]
    out = np.ascontiguousarray(y.reshape(out_ch, n, h, wd).transpose(1, 0, 2, 3))
    if activation == "relu":
        np.maximum(out, 0, out=out)

    def vjp(g):
        if activation == "relu":
            g = g * (out > 0)
        gm = g.transpose(1, 0, 2, 3).reshape(out_ch, n * h * wd)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wm.T @ gm
            if k == 1:
                gx = gcols.reshape(in_ch, n, h, wd).transpose(1, 0, 2, 3)
            else:
                gcols = gcols.reshape(in_ch, k, k, n, h, wd)
                # accumulate channel-major so every slice add is contiguous
                gxp = np.zeros((in_ch, n, h + 2 * p, wd + 2 * p), dtype=g.dtype)
                for ky in range(k):
                    for kx in range(k):
                        gxp[:, :, ky:ky + h, kx:kx + wd] += gcols[:, ky, kx]
                gx = gxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
        return gx, gw, gb

    return _make(out, (x, w, b), vjp)


def _shifts3(xp: np.ndarray, h: int, w: int):
    for dy in range(3):
        for dx in range(3):
            yield dy, dx, xp[:, :, dy:dy + h, dx:dx + w]


def _check_pool_input(x: Tensor, name: str) -> None:
    _check4d(x, name)
    if x.data.size == 0:
        raise ShapeError(f"{name}: empty tensor {x.shape}")


def maxpool2d(x: Tensor) -> Tensor:
    """3x3 max pooling, stride 1, zero padding 1 (output keeps the input shape)."""
    _check_pool_input(x, "maxpool2d")
    n, c, h, w = x.shape
    xp = _pad_hw(x.data, 1)
    out = xp[:, :, 0:h, 0:w].copy()
    for _, _, s in _shifts3(xp, h, w):
        np.maximum(out, s, out=out)

    def vjp(g):
        # ties route the gradient to the first maximum in raster order
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for dy, dx, s in _shifts3(xp, h, w):
            hit = (s == out) & ~taken
            taken |= hit
            gxp[:, :, dy:dy + h, dx:dx + w] += np.where(hit, g, 0)
        return (gxp[:, :, 1:h + 1, 1:w + 1],)

    return _make(out, (x,), vjp)


def avgpool2d(x: Tensor) -> Tensor:
    """3x3 mean pooling, stride 1, zero padding 1; the divisor is always 9."""
    _check_pool_input(x, "avgpool2d")
    n, c, h, w = x.shape
    xp = _pad_hw(x.data, 1)
    acc = np.zeros(x.shape, dtype=x.dtype)
    for _, _, s in _shifts3(xp, h, w):
        acc += s
    out = acc / 9

    def vjp(g):
        g9 = g / 9
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                gxp[:, :, dy:dy + h, dx:dx + w] += g9
        return (gxp[:, :, 1:h + 1, 1:w + 1],)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e))
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2 * out),))


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    return _make(out, (x,), lambda g: (g * np.sign(x.data),))


def _broadcast_pair(a: Tensor, b: Tensor, name: str):
    """Resolve the shapes allowed for binary ops.

    Equal shapes, a 0-d scalar on either side, or the single 4D case where
    one operand has one channel and is copied across the other's channels.
    Returns the reduction needed to fold a gradient back onto each operand.
    """
    if a.shape == b.shape:
        return None, None
    if b.ndim == 0:
        return None, "all"
    if a.ndim == 0:
        return "all", None
    if a.ndim == 4 and b.ndim == 4:
        na, ca, ha, wa = a.shape
        nb, cb, hb, wb = b.shape
        if (na, ha, wa) == (nb, hb, wb):
            if cb == 1:
                return None, "channels"
            if ca == 1:
                return "channels", None
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _fold(g: np.ndarray, how):
    if how is None:
        return g
    if how == "all":
        return g.sum()
    return g.sum(axis=1, keepdims=True)


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ra, rb = _broadcast_pair(a, b, "add")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_fold(g, ra), _fold(g, rb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ra, rb = _broadcast_pair(a, b, "sub")
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_fold(g, ra), _fold(-g, rb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ra, rb = _broadcast_pair(a, b, "mul")
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_fold(g * b.data, ra), _fold(g * a.data, rb)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ra, rb = _broadcast_pair(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        return _fold(ga, ra), _fold(-ga * out, rb)

    return _make(out, (a, b), vjp)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return a, b


# ---------------------------------------------------------------------------
# layout


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel-wise splice with ``a``'s channels first."""
    _check4d(a, "concat_channels")
    _check4d(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} differ outside channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check4d(x, "slice_channels")
    c = x.shape[1]
    if not 0 <= start <= stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")
    out = x.data[:, start:stop]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(out, (x,), vjp)


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour resize; output pixel (y, x) copies source (y*h//H, x*w//W)."""
    _check4d(x, "upsample_nearest")
    n, c, h, w = x.shape
    if target_h <= 0 or target_w <= 0:
        raise ShapeError(f"upsample_nearest: bad target size {target_h}x{target_w}")
    if target_h < h or target_w < w:
        raise ShapeError(f"upsample_nearest: target {target_h}x{target_w} smaller than {h}x{w}")
    iy = _nearest_index(h, target_h)
    ix = _nearest_index(w, target_w)
    out = x.data[:, :, iy][:, :, :, ix]

    def vjp(g):
        # index maps are non-decreasing and onto, so each source row owns a run
        sy = np.searchsorted(iy, np.arange(h))
        sx = np.searchsorted(ix, np.arange(w))
        gy = np.add.reduceat(g, sy, axis=2)
        return (np.add.reduceat(gy, sx, axis=3),)

    return _make(out, (x,), vjp)


def subsample(x: Tensor, step: int = 2) -> Tensor:
    """Keep every ``step``-th row and column starting at 0."""
    _check4d(x, "subsample")
    out = x.data[:, :, ::step, ::step]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::step, ::step] = g
        return (gx,)

    return _make(out, (x,), vjp)


def gaussian_blur(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Separable depthwise correlation with a 1D kernel, "valid" region only."""
    _check4d(x, "gaussian_blur")
    kernel = np.asarray(kernel, dtype=x.dtype)
    k = kernel.shape[0]
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"gaussian_blur: window {k} larger than image {h}x{w}")
    rows = sliding_window_view(x.data, k, axis=3) @ kernel
    out = sliding_window_view(rows, k, axis=2) @ kernel
    ho, wo = out.shape[2], out.shape[3]

    def vjp(g):
        gr = np.zeros((n, c, h, wo), dtype=g.dtype)
        for j in range(k):
            gr[:, :, j:j + ho, :] += kernel[j] * g
        gx = np.zeros(x.shape, dtype=g.dtype)
        for j in range(k):
            gx[:, :, :, j:j + wo] += kernel[j] * gr
        return (gx,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return _make(out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    out = np.asarray(x.data.mean())
    return _make(out, (x,), lambda g: (np.broadcast_to(g / size, x.shape),))


def as_params(mapping: Mapping[str, Tensor], prefix: str) -> ConvParams:
    return ConvParams(mapping[prefix + ".weight"], mapping[prefix + ".bias"])


def stack_batch(items: Sequence[Tensor]) -> Tensor:
    return Tensor(np.concatenate([t.data for t in items], axis=0))
