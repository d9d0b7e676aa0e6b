"""Dense double-precision tensors with reverse-mode automatic differentiation.

Every op records its parents and a vector-Jacobian closure on the output
tensor whenever any input requires a gradient. :func:`backward` sorts the
recorded graph topologically from the loss and sweeps it in reverse.

There is no broadcasting: binary ops require identical shapes, and callers
align shapes explicitly with :func:`expand_channels` and friends. Images and
fields are channel-first arrays ``[C, *spatial]``.
"""

from __future__ import annotations

from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "record_op",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "exp",
    "abs_",
    "square",
    "leaky_relu",
    "clamp_min",
    "elementwise",
    "reduce",
    "sum_",
    "mean",
    "conv",
    "upsample_nearest",
    "concat_channels",
    "take_channels",
    "expand_channels",
    "channel_mean",
    "channel_max",
    "diff",
    "shift",
    "stencil",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""

    def __init__(self, op: str):
        super().__init__(f"non-finite output in op '{op}'")
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(op: str, data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = vjp
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return record_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return record_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = a.data / b.data
    return record_op("div", q, (a, b), lambda g: (g / b.data, -g * q / b.data))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record_op("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return record_op("exp", e, (a,), lambda g: (g * e,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return record_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record_op("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    k = np.where(a.data > 0, 1.0, slope)
    return record_op("leaky_relu", a.data * k, (a,), lambda g: (g * k,))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= lo
    return record_op("clamp_min", np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


_UNARY = {"exp": exp, "abs": abs_, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None, *, slope: float = 0.2, factor: float = 1.0) -> Tensor:
    """Dispatch by name; ``scale`` uses ``factor``, ``leaky_relu`` uses ``slope``."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "scale":
        return scale(a, factor)
    if op_kind == "leaky_relu":
        return leaky_relu(a, slope)
    raise ValueError(f"unknown elementwise op '{op_kind}'")


# -- reductions --------------------------------------------------------------


def sum_(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("sum of an empty tensor")
    shape = a.shape
    return record_op("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    shape = a.shape
    return record_op("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def reduce(op_kind: str, a) -> Tensor:
    if op_kind == "sum":
        return sum_(a)
    if op_kind == "mean":
        return mean(a)
    raise ValueError(f"unknown reduction '{op_kind}'")


# -- channel plumbing --------------------------------------------------------


def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    return record_op(
        "concat_channels",
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        lambda g: (g[:ca], g[ca:]),
    )


def take_channels(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"take_channels: [{start}, {stop}) out of range for {a.shape[0]} channels")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return record_op("take_channels", a.data[start:stop].copy(), (a,), vjp)


def expand_channels(a, n: int) -> Tensor:
    """Repeat a single-channel tensor ``[1, ...]`` to ``[n, ...]``."""
    a = as_tensor(a)
    if a.shape[0] != 1:
        raise ShapeError(f"expand_channels expects one channel, got {a.shape[0]}")
    return record_op(
        "expand_channels",
        np.repeat(a.data, n, axis=0),
        (a,),
        lambda g: (g.sum(axis=0, keepdims=True),),
    )


def channel_mean(a) -> Tensor:
    a = as_tensor(a)
    c = a.shape[0]
    return record_op(
        "channel_mean",
        a.data.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g / c, c, axis=0),),
    )


def channel_max(a) -> Tensor:
    """Per-voxel max over channels; the gradient goes to the first argmax."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=0)[None]
    m = np.take_along_axis(a.data, idx, axis=0)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g, axis=0)
        return (full,)

    return record_op("channel_max", m, (a,), vjp)


# -- spatial ops -------------------------------------------------------------


def diff(a, axis: int) -> Tensor:
    """Forward difference ``a[i+1] - a[i]`` along ``axis``; that axis shrinks by one."""
    a = as_tensor(a)
    if not 0 <= axis < a.ndim or a.shape[axis] < 2:
        raise ShapeError(f"diff: axis {axis} invalid for shape {a.shape}")
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis] = slice(1, None)
    lo[axis] = slice(None, -1)
    hi, lo = tuple(hi), tuple(lo)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[hi] += g
        full[lo] -= g
        return (full,)

    return record_op("diff", a.data[hi] - a.data[lo], (a,), vjp)


def _fold_edge_pad(gp: np.ndarray, pads: Sequence[tuple]) -> np.ndarray:
    """Adjoint of ``np.pad(mode='edge')``: pile padded gradient onto border slabs."""
    for ax, (lo, hi) in enumerate(pads):
        if lo == 0 and hi == 0:
            continue
        n = gp.shape[ax] - lo - hi
        core = np.take(gp, np.arange(lo, lo + n), axis=ax)
        if lo:
            first = [slice(None)] * gp.ndim
            first[ax] = slice(0, 1)
            core[tuple(first)] += np.take(gp, np.arange(0, lo), axis=ax).sum(axis=ax, keepdims=True)
        if hi:
            last = [slice(None)] * gp.ndim
            last[ax] = slice(n - 1, n)
            core[tuple(last)] += np.take(gp, np.arange(lo + n, lo + n + hi), axis=ax).sum(axis=ax, keepdims=True)
        gp = core
    return gp


def shift(a, offset: Sequence[int]) -> Tensor:
    """``out[c, x] = a[c, clamp(x + offset)]`` with edge clamping per spatial axis."""
    a = as_tensor(a)
    offset = tuple(int(o) for o in offset)
    if len(offset) != a.ndim - 1:
        raise ShapeError(f"shift: offset {offset} does not match spatial rank of {a.shape}")
    pads = [(0, 0)] + [(max(-o, 0), max(o, 0)) for o in offset]
    ap = np.pad(a.data, pads, mode="edge")
    sl = (slice(None),) + tuple(slice(lo + o, lo + o + n) for (lo, _), o, n in zip(pads[1:], offset, a.shape[1:]))

    def vjp(g):
        gp = np.zeros(ap.shape)
        gp[sl] = g
        return (_fold_edge_pad(gp, pads),)

    return record_op("shift", ap[sl].copy(), (a,), vjp)


def stencil(a, kernel: np.ndarray) -> Tensor:
    """Per-channel correlation with an odd-sized ``kernel`` under edge clamping."""
    a = as_tensor(a)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != a.ndim - 1 or any(k % 2 == 0 for k in kernel.shape):
        raise ShapeError(f"stencil: kernel {kernel.shape} invalid for {a.shape}")
    pads = [(0, 0)] + [(k // 2, k // 2) for k in kernel.shape]
    ap = np.pad(a.data, pads, mode="edge")
    spatial = a.shape[1:]
    taps = []
    for tap in product(*(range(k) for k in kernel.shape)):
        w = kernel[tap]
        if w != 0.0:
            taps.append((w, (slice(None),) + tuple(slice(t, t + n) for t, n in zip(tap, spatial))))
    out = np.zeros(a.shape)
    for w, sl in taps:
        out += w * ap[sl]

    def vjp(g):
        gp = np.zeros(ap.shape)
        for w, sl in taps:
            gp[sl] += w * g
        return (_fold_edge_pad(gp, pads),)

    return record_op("stencil", out, (a,), vjp)


def conv(x, kernels, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x [C_in, *sp]`` with ``kernels [C_out, C_in, *k]``.

    ``same`` zero-pads by ``k // 2`` so the output extent is ``ceil(n / stride)``;
    ``valid`` drops the border. The optional ``bias`` has shape ``[C_out]``.
    """
    x, w = as_tensor(x), as_tensor(kernels)
    if stride not in (1, 2):
        raise ValueError(f"conv: stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv: unknown padding '{padding}'")
    nd = x.ndim - 1
    if w.ndim != nd + 2:
        raise ShapeError(f"conv: kernel rank {w.ndim} does not fit input {x.shape}")
    c_out, c_in = w.shape[:2]
    ksize = w.shape[2:]
    if c_in != x.shape[0]:
        raise ShapeError(f"conv: channel mismatch, input has {x.shape[0]}, kernel expects {c_in}")
    if any(k % 2 == 0 for k in ksize):
        raise ShapeError(f"conv: kernel extent must be odd, got {ksize}")

    if padding == "same":
        pads = [(0, 0)] + [(k // 2, k // 2) for k in ksize]
    else:
        pads = [(0, 0)] * (nd + 1)
    xp = np.pad(x.data, pads)
    out_sp = tuple((xp.shape[i + 1] - ksize[i]) // stride + 1 for i in range(nd))
    if any(n < 1 for n in out_sp):
        raise ShapeError(f"conv: input {x.shape} too small for kernel {ksize}")
    slices = [
        (slice(None),) + tuple(slice(t, t + stride * (m - 1) + 1, stride) for t, m in zip(tap, out_sp))
        for tap in product(*(range(k) for k in ksize))
    ]
    n_taps = len(slices)
    npos = int(np.prod(out_sp))
    cols = np.empty((c_in, n_taps, npos))
    for t, sl in enumerate(slices):
        cols[:, t] = xp[sl].reshape(c_in, npos)
    cols = cols.reshape(c_in * n_taps, npos)
    wm = w.data.reshape(c_out, c_in * n_taps)
    out = wm @ cols
    parents = (x, w)
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (c_out,):
            raise ShapeError(f"conv: bias shape {b.shape}, expected ({c_out},)")
        out += b.data[:, None]
        parents = (x, w, b)
    out = out.reshape((c_out,) + out_sp)
    xshape, wshape = x.shape, w.shape

    def vjp(g):
        gm = g.reshape(c_out, npos)
        gx = gw = None
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(c_in, n_taps, *out_sp)
            gxp = np.zeros(xp.shape)
            for t, sl in enumerate(slices):
                gxp[sl] += gcols[:, t]
            crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, xshape))
            gx = gxp[crop]
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(wshape)
        if len(parents) == 3:
            return gx, gw, gm.sum(axis=1)
        return gx, gw

    return record_op("conv", out, parents, vjp)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if factor != 2:
        raise ValueError(f"upsample_nearest supports factor 2 only, got {factor}")
    out = x.data
    for ax in range(1, x.ndim):
        out = np.repeat(out, 2, axis=ax)
    shape = x.shape

    def vjp(g):
        split = [shape[0]]
        for n in shape[1:]:
            split += [n, 2]
        g = g.reshape(split)
        return (g.sum(axis=tuple(range(2, g.ndim, 2))),)

    return record_op("upsample_nearest", out, (x,), vjp)


# -- reverse sweep -----------------------------------------------------------


def _topological(loss: Tensor) -> list:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients are overwritten, not accumulated across calls. The recorded
    graph is consumed: interior nodes drop their parents afterwards.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node))
        node.grad = g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-6,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps must lie in [1e-6, 1e-4], got {eps}")
    base = np.array(as_tensor(point).data, dtype=np.float64)

    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ShapeError("grad_check: f must be scalar-valued")
    backward(out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.reshape(base.shape)

    if f(Tensor(base.copy())).item() != f(Tensor(base.copy())).item():
        raise RuntimeError("grad_check: f is not deterministic")

    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = base.copy()
        xp.flat[i] += eps
        xm = base.copy()
        xm.flat[i] -= eps
        numeric = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * eps)
        a = analytic.flat[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
