"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the trajectory model needs are provided. Every
op is a plain function: it computes its output with numpy and, when a
:class:`Tape` is active and an input requires gradients, records a node
holding the backward rule.

Forward contractions use ``np.einsum`` without path optimisation rather than
BLAS. Per-row results are then independent of how many rows are batched
together, which keeps batched and per-pedestrian evaluation bit-identical.
"""
from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_local = threading.local()

# Non-finite checks after every recorded forward op.
DEBUG = bool(os.environ.get("CARPE_DEBUG"))


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


def set_precision(name: str) -> None:
    """Switch the default scalar type for new tensors (``"f32"`` or ``"f64"``)."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


def precision_name(dtype=None) -> str:
    dtype = np.dtype(dtype or _dtype)
    for name, dt in _PRECISIONS.items():
        if np.dtype(dt) == dtype:
            return name
    raise ValueError(f"unsupported dtype {dtype}")


@contextmanager
def precision(name: str) -> Iterator[None]:
    prev = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


class Tensor:
    """A numpy array plus gradient bookkeeping.

    Leaves (parameters, inputs) are created directly; op outputs are marked
    non-leaf. ``grad`` is only ever written on leaves with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed ops for one forward pass.

    Use as a context manager; ops run inside the block are recorded.
    :func:`backward` consumes the tape and clears it.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_op(op: str, inputs: Sequence[Tensor], out: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` as a Tensor and record it on the active tape if needed."""
    result = Tensor(out, dtype=out.dtype)
    result._leaf = False
    if DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(x) to every leaf recorded on ``tape``.

    Leaf gradients accumulate into ``.grad`` so several backward passes can
    be summed before an optimizer step. The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if t.is_leaf:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
    tape.nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and shape operations


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_op("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_op("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return make_op("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)
    return make_op("relu", (x,), out, lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return make_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", ts, out, bw)


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the leading axis: an N x D matrix becomes a length-D vector."""
    out = x.data.sum(axis=0)
    return make_op("sum_rows", (x,), out,
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def total(x: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_op("sum", (x,), out,
                   lambda g: (np.full(x.shape, g, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# Layers


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``out[n, o] = sum_i x[n, i] * W[o, i] + b[o]``."""
    if x.ndim != 2 or W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[1] != W.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape} / bias {b.shape}")
    out = np.einsum("ni,oi->no", x.data, W.data) + b.data

    def bw(g):
        return g @ W.data, g.T @ x.data, g.sum(axis=0)

    return make_op("linear", (x, W, b), out, bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Valid (unpadded) strided cross-correlation.

    ``x`` is C x H x W or N x C x H x W; ``kernel`` is C_out x C_in x kh x kw.
    Kernels here are at most 2x2, so patches are gathered explicitly and
    contracted in one einsum.
    """
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ShapeError(f"conv2d: input must be CxHxW or NxCxHxW, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, ck, kh, kw = kernel.shape
    sh, sw = stride
    if ck != c or bias.shape != (o,):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape} / bias {bias.shape}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than input {x.shape}")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1

    # patches[n, i, j, c, a, b] = x[n, c, i*sh + a, j*sw + b]
    patches = np.empty((n, ho, wo, c, kh, kw), dtype=xd.dtype)
    for a in range(kh):
        for bb in range(kw):
            sl = xd[:, :, a:a + sh * (ho - 1) + 1:sh, bb:bb + sw * (wo - 1) + 1:sw]
            patches[..., a, bb] = sl.transpose(0, 2, 3, 1)
    flat = patches.reshape(n, ho, wo, c * kh * kw)
    kflat = kernel.data.reshape(o, -1)
    out = np.einsum("nijk,ok->noij", flat, kflat) + bias.data[:, None, None]

    def bw(g):
        g4 = g if batched else g[None]
        gk = np.tensordot(g4, flat, axes=([0, 2, 3], [0, 1, 2])).reshape(kernel.shape)
        gb = g4.sum(axis=(0, 2, 3))
        gp = np.tensordot(g4, kflat, axes=([1], [0])).reshape(n, ho, wo, c, kh, kw)
        gx = np.zeros_like(xd)
        for a in range(kh):
            for bb in range(kw):
                gx[:, :, a:a + sh * (ho - 1) + 1:sh, bb:bb + sw * (wo - 1) + 1:sw] += \
                    gp[..., a, bb].transpose(0, 3, 1, 2)
        return (gx if batched else gx[0]), gk, gb

    return make_op("conv2d", (x, kernel, bias), out if batched else out[0], bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    target = as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def bw(g):
        gd = (2.0 / diff.size) * g * diff
        return gd.astype(pred.dtype), (-gd).astype(target.dtype)

    return make_op("mse_loss", (pred, target), out, bw)
