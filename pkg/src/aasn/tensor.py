"""Minimal reverse-mode autodiff over numpy arrays.

Every network value is a :class:`Tensor` wrapping a float array (N x C x H x W
for feature maps, 0-d for losses, 1-d for per-channel parameters).  Ops record a
:class:`Node` on their output; :func:`backward` topologically sorts the graph
reachable from a scalar loss into a :class:`Tape` and replays it in reverse.

Training runs in float32.  Passing float64 arrays through the same ops gives the
64-bit shadow mode used by the gradient checker; every op preserves the dtype of
its inputs.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import CheckpointError, ContractError, DimensionError

_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Assert finiteness of every op output when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


class Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _raise_scalar():
    raise ContractError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = Node(op, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Nodes reachable from one output, inputs always before their consumers."""

    tensors: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls(order)


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, loss.dtype)
    }
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t._node.backward_fn(g)
        for inp, ig in zip(t._node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + ig
            else:
                grads[k] = ig


# ---------------------------------------------------------------------------
# elementwise / reductions


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise DimensionError(f"{op}: axis {axis} differs ({da} vs {db})")
        raise DimensionError(f"{op}: rank differs ({a.ndim} vs {b.ndim})")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(
        np.asarray(a.data.sum(), a.dtype), (a,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype),), "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(
        np.asarray(a.data.mean(), a.dtype), (a,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


# ---------------------------------------------------------------------------
# convolution and friends


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected N x C x H x W input, got rank {x.ndim}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    _require_4d(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: weight must be (Cout, Cin, k, k), got {w.shape}")
    cout, cin, k, _ = w.shape
    n, c, h, wd = x.shape
    if c != cin:
        raise DimensionError(f"conv2d: axis 1 (channels) of input is {c}, weight expects {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias axis 0 is {b.shape}, expected ({cout},)")
    if stride < 1 or pad < 0:
        raise ContractError("conv2d: stride must be >= 1 and pad >= 0")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{wd}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = w.data.reshape(cout, cin * k * k)
    # columns laid out (Cin, k, k, N, Ho, Wo): cheap to build, BLAS-friendly
    cols = np.empty((cin, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(cin * k * k, n * ho * wo)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    y = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(cin, k, k, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gxt = gxp.transpose(1, 0, 2, 3)
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(y, inputs, bw, "conv2d")


def linear_1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-pixel linear map; ``w`` is (Cout, Cin)."""
    _require_4d(x, "linear_1x1")
    if w.ndim != 2:
        raise DimensionError(f"linear_1x1: weight must be (Cout, Cin), got {w.shape}")
    cout, cin = w.shape
    n, c, h, wd = x.shape
    if c != cin:
        raise DimensionError(f"linear_1x1: axis 1 (channels) of input is {c}, weight expects {cin}")
    xd = x.data
    y = np.einsum("oc,nchw->nohw", w.data, xd, optimize=True)
    if b is not None:
        y += b.data[None, :, None, None]

    def bw(g):
        gx = np.einsum("oc,nohw->nchw", w.data, g, optimize=True) if x.requires_grad else None
        gw = np.einsum("nohw,nchw->oc", g, xd, optimize=True) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make(y.astype(xd.dtype, copy=False), inputs, bw, "linear_1x1")


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    _require_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: axis 1 (channels) of input is {c}, affine params are {gamma.shape}/{beta.shape}"
        )
    if state.eps <= 0:
        raise ContractError("batchnorm2d: eps must be positive")
    xd = x.data
    dt = xd.dtype
    if mode == "train":
        # per-channel contiguous rows keep each channel's reduction independent of C
        rows = np.ascontiguousarray(xd.transpose(1, 0, 2, 3)).reshape(c, -1)
        m = rows.shape[1]
        mean = rows.mean(axis=1)
        var = ((rows - mean[:, None]) ** 2).mean(axis=1)
        mom = state.momentum
        unbiased = var * (m / max(m - 1, 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    elif mode == "eval":
        mean = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
        m = None
    else:
        raise ContractError(f"batchnorm2d: unknown mode {mode!r}")
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(dt)
    xhat = (xd - mean[None, :, None, None]) * invstd[None, :, None, None]
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (invstd[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd[None, :, None, None]
        return gx, gg, gb

    return _make(y.astype(dt, copy=False), (x, gamma, beta), bw, "batchnorm2d")


def _require_even(x: Tensor, op: str) -> None:
    _require_4d(x, op)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"{op}: spatial dims must be even, got {x.shape[2]}x{x.shape[3]}")


def avgpool2x2(x: Tensor) -> Tensor:
    _require_even(x, "avgpool2x2")
    n, c, h, w = x.shape
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        q = g * g.dtype.type(0.25)
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return _make(y.astype(x.dtype, copy=False), (x,), bw, "avgpool2x2")


def maxpool2x2(x: Tensor) -> Tensor:
    _require_even(x, "maxpool2x2")
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximal index, i.e. row-major scan order within the window
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(y, (x,), bw, "maxpool2x2")


def _upsample_matrix(n_in: int, dtype) -> np.ndarray:
    # half-pixel centres: out pixel i samples input coordinate (i + 0.5) / 2 - 0.5
    n_out = 2 * n_in
    a = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) / 2 - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    a[np.arange(n_out), i0] += 1 - f
    a[np.arange(n_out), i1] += f
    return a.astype(dtype)


def upsample_bilinear2x(x: Tensor) -> Tensor:
    _require_4d(x, "upsample_bilinear2x")
    _, _, h, w = x.shape
    ah = _upsample_matrix(h, x.dtype)
    aw = _upsample_matrix(w, x.dtype)
    y = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)

    def bw(g):
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)

    return _make(y, (x,), bw, "upsample_bilinear2x")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ContractError("concat_channels needs at least one tensor")
    ref = tensors[0]
    for t in tensors:
        _require_4d(t, "concat_channels")
        for axis in (0, 2, 3):
            if t.shape[axis] != ref.shape[axis]:
                raise DimensionError(
                    f"concat_channels: axis {axis} differs ({t.shape[axis]} vs {ref.shape[axis]})"
                )
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    y = np.concatenate([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(y, tuple(tensors), bw, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise DimensionError(f"slice_channels: [{start}, {stop}) out of range for axis 1 of size {c}")

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), bw, "slice_channels")


def flip_horizontal(x: Tensor) -> Tensor:
    _require_4d(x, "flip_horizontal")
    return _make(np.ascontiguousarray(x.data[..., ::-1]), (x,), lambda g: (g[..., ::-1],), "flip_horizontal")


# ---------------------------------------------------------------------------
# spatial transformer sampling


def _bilinear_taps(grid: np.ndarray, h: int, w: int):
    """Four (flat index, weight) taps per output pixel; invalid taps get weight 0."""
    g = grid.astype(np.float64)
    px = (g[:, 0] + 1.0) * (w - 1) / 2.0
    py = (g[:, 1] + 1.0) * (h - 1) / 2.0
    # snap float noise so identity grids reproduce pixels exactly
    rx, ry = np.round(px), np.round(py)
    px = np.where(np.abs(px - rx) < 1e-6, rx, px)
    py = np.where(np.abs(py - ry) < 1e-6, ry, py)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & np.isfinite(wt)
        idx = np.where(valid, np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1), 0)
        taps.append((idx.reshape(idx.shape[0], -1), np.where(valid, wt, 0.0).reshape(idx.shape[0], -1)))
    return taps


def grid_sample_bilinear(x: Tensor, grid) -> Tensor:
    """Sample ``x`` at normalized (u, v) grid locations with zero padding.

    ``grid`` is (N or 1, 2, Hout, Wout); channel 0 is horizontal.  (-1, -1) is the
    centre of the top-left pixel and (1, 1) the centre of the bottom-right one.
    The grid is a constant: no gradient flows to it.
    """
    _require_4d(x, "grid_sample_bilinear")
    gd = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    if gd.ndim != 4 or gd.shape[1] != 2:
        raise DimensionError(f"grid_sample_bilinear: grid must be (N, 2, H, W), got {gd.shape}")
    n, c, h, w = x.shape
    if gd.shape[0] not in (1, n):
        raise DimensionError(f"grid_sample_bilinear: grid axis 0 is {gd.shape[0]}, input batch is {n}")
    ho, wo = gd.shape[2], gd.shape[3]
    taps = _bilinear_taps(gd, h, w)
    dt = x.dtype
    xf = x.data.reshape(n, c, h * w)
    out = np.zeros((n, c, ho * wo), dtype=np.float64)
    for idx, wt in taps:
        for b in range(n):
            gb = 0 if idx.shape[0] == 1 else b
            out[b] += xf[b][:, idx[gb]] * wt[gb]
    y = out.astype(dt).reshape(n, c, ho, wo)

    def bw(g):
        gf = g.reshape(n, c, ho * wo).astype(np.float64)
        gx = np.zeros((n, c, h * w), dtype=np.float64)
        offs = (np.arange(c) * (h * w))[:, None]
        for idx, wt in taps:
            for b in range(n):
                gb = 0 if idx.shape[0] == 1 else b
                flat = (offs + idx[gb][None, :]).ravel()
                gx[b] += np.bincount(flat, weights=(gf[b] * wt[gb]).ravel(), minlength=c * h * w).reshape(c, h * w)
        return (gx.astype(dt).reshape(n, c, h, w),)

    return _make(y, (x,), bw, "grid_sample_bilinear")


def identity_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    u = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    v = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv])[None].astype(dtype)


# ---------------------------------------------------------------------------
# fused losses


def bce_with_logits(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on sigmoid(logits) via log1p(exp(-|z|))."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs target {t.shape}")
    z = logits.data.astype(np.float64)
    t64 = t.astype(np.float64)
    per = np.maximum(z, 0) - z * t64 + np.log1p(np.exp(-np.abs(z)))
    scale = 1.0 / per.size if reduction == "mean" else 1.0
    val = per.sum() * scale
    dt = logits.dtype

    def bw(g):
        p = np.where(z >= 0, 1 / (1 + np.exp(-z)), np.exp(z) / (1 + np.exp(z)))
        return (((p - t64) * scale * float(g)).astype(dt),)

    return _make(np.asarray(val, dt), (logits,), bw, "bce_with_logits")


def contrastive_margin(a: Tensor, b: Tensor, inside, margin: float, reduction: str = "mean") -> Tensor:
    """Pixel-wise margin loss on squared feature distance.

    Outside ``inside`` the squared distance is penalised, inside the hinge
    max(0, margin - d^2).  The hinge is inactive at equality.
    """
    _require_4d(a, "contrastive_margin")
    _check_same(a, b, "contrastive_margin")
    msk = inside.data if isinstance(inside, Tensor) else np.asarray(inside)
    n, c, h, w = a.shape
    if msk.shape != (n, 1, h, w):
        raise DimensionError(f"contrastive_margin: mask {msk.shape} vs features {(n, 1, h, w)}")
    msk = msk > 0.5
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    d2 = (diff * diff).sum(axis=1, keepdims=True)
    active = msk & (margin - d2 > 0)
    per = np.where(msk, np.maximum(0.0, margin - d2), d2)
    scale = 1.0 / per.size if reduction == "mean" else 1.0
    val = per.sum() * scale
    dt = a.dtype

    def bw(g):
        coef = np.where(msk, np.where(active, -1.0, 0.0), 1.0) * scale * float(g)
        ga = (2 * coef * diff).astype(dt)
        return ga, -ga

    return _make(np.asarray(val, dt), (a, b), bw, "contrastive_margin")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor or array)."""
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
        arr = p.data if isinstance(p, Tensor) else p
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(arr)
            v = np.zeros_like(arr)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        arr -= upd.astype(arr.dtype)
    return params


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)


# ---------------------------------------------------------------------------
# checkpoint fragments

MAGIC = b"AASN"
FORMAT_VERSION = 1


def _dims4(shape: tuple) -> tuple:
    if len(shape) > 4:
        raise DimensionError(f"cannot store rank-{len(shape)} tensor in a 4-dim record")
    return (1,) * (4 - len(shape)) + tuple(shape)


def write_fragment(fh, tensors: dict, header: str = "") -> None:
    """Write named tensors as magic, version, header text, then records.

    Each record is: u32 name length, UTF-8 name, four u32 dims, float32 payload.
    All integers are little-endian.
    """
    fh.write(MAGIC)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    hb = header.encode("utf-8")
    fh.write(struct.pack("<I", len(hb)))
    fh.write(hb)
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        nb = name.encode("utf-8")
        fh.write(struct.pack("<I", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<4I", *_dims4(a.shape)))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated file while reading {what}")
    return buf


def read_fragment(fh) -> tuple[str, dict]:
    """Inverse of :func:`write_fragment`; returns (header, name -> 4-d float32 array)."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (this build reads {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    header = _read_exact(fh, hlen, "header").decode("utf-8")
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(fh, 4, f"entry {i} name length"))
        name = _read_exact(fh, nlen, f"entry {i} name").decode("utf-8")
        dims = struct.unpack("<4I", _read_exact(fh, 16, f"dims of {name!r}"))
        size = int(np.prod(dims))
        payload = _read_exact(fh, 4 * size, f"payload of {name!r}")
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if fh.read(1):
        raise CheckpointError("trailing bytes after last entry")
    return header, out
