"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active on the current
thread and at least one input requires a gradient.  Outside a tape every op is
a plain numpy computation, which is what inference uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> list:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; nested tapes shadow outer ones on the same thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: tuple, output: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in tape.nodes:
        produced.add(id(node.output))
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if key not in produced:
                leaves[key] = inp
    if not loss.requires_grad and id(loss) not in produced:
        return
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# plumbing


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(op, tuple(inputs), out, bw)
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _emit("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _emit("power", a.data ** p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in overflow-safe form."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("softplus", out, (a,), lambda g: (g * sig,))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", out, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), bw)


# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply the per-feature affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shape {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _emit("layer_norm", out, (x, gamma, beta), bw)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation for ``(C,H,W)`` or ``(B,C,H,W)`` input.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``r <- momentum * r + (1 - momentum) * batch``
    (unbiased variance for the running estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (3, 4):
        raise DimensionError(f"batch_norm expects (C,H,W) or (B,C,H,W), got {x.shape}")
    caxis = x.ndim - 3
    c = x.shape[caxis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine shape must be ({c},)")
    axes = tuple(i for i in range(x.ndim) if i != caxis)
    bshape = [1] * x.ndim
    bshape[caxis] = c
    bshape = tuple(bshape)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if not training:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv
        out = xhat * g_ + b_

        def bw_eval(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _emit("batch_norm", out, (x, gamma, beta), bw_eval)

    n = x.data.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + b_

    unbiased = var.reshape(c) * (n / (n - 1) if n > 1 else 1.0)
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu.reshape(c)
    running_var *= momentum
    running_var += (1.0 - momentum) * unbiased

    def bw(g):
        gx_hat = g * g_
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axes, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _emit("batch_norm", out, (x, gamma, beta), bw)


def conv2d(x, w, b, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """2-D cross-correlation plus bias.

    ``x`` is ``(Cin,H,W)`` or ``(B,Cin,H,W)``; ``w`` is ``(Cout,Cin,k,k)``.
    ``pad`` defaults to ``k // 2`` (zero "same" padding for odd k).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d shapes unsupported: x{x.shape} w{w.shape}")
    bsz, cin, h, wd = xd.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin or kh != kw:
        raise DimensionError(f"conv2d kernel {w.shape} does not fit input channels {cin}")
    if b.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {b.shape} != ({cout},)")
    k = kh
    p = k // 2 if pad is None else pad
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    # cols: (B, Cin, Ho, Wo, k, k)
    out = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True) + b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gb = g4.sum(axis=(0, 2, 3))
        gw = np.einsum("bohw,bchwij->ocij", g4, cols, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                contrib = np.einsum("bohw,oc->bchw", g4, w.data[:, :, i, j], optimize=True)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
        gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        if squeeze:
            gx = gx[0]
        return gx, gw, gb

    return _emit("conv2d", out, (x, w, b), bw)


def max_pool_patches(x, p: int) -> Tensor:
    """Non-overlapping P x P max pooling over the last two axes."""
    x = as_tensor(x)
    h, wd = x.shape[-2], x.shape[-1]
    if h % p or wd % p:
        raise DimensionError(f"patch size {p} does not divide {h}x{wd}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // p, p, wd // p, p))
    blocks = np.moveaxis(blocks, -3, -2)  # (..., gh, gw, p, p)
    flat = blocks.reshape(lead + (h // p, wd // p, p * p))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(lead + (h // p, wd // p, p, p))
        gb = np.moveaxis(gb, -2, -3)
        return (gb.reshape(x.shape),)

    return _emit("max_pool_patches", out, (x,), bw)


# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def transpose(a, ax1: int = -2, ax2: int = -1) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return permute(a, axes)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(ts), bw)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(out, copy=True), (a,), bw)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in ax]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), bw)
