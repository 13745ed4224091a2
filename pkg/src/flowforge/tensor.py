"""Dense NCHW tensors with a reverse-mode gradient tape.

Every value in the library -- images, feature maps, flow fields, masks,
gradients -- is a 4-D ``(batch, channels, height, width)`` array of f32
(training) or f64 (verification).  Operations are pure functions that
return fresh tensors; when a :class:`Tape` is active and an input requires
gradients, the op records a backward rule so :meth:`Tape.backward` can
replay the computation in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "tensor",
    "zeros",
    "full",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "abs_",
    "pow_scalar",
    "leaky_relu",
    "sigmoid",
    "concat_channels",
    "sum_all",
    "sum_channels",
    "l2norm_channels",
]


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class Tensor:
    """Immutable 4-D ``(B, C, H, W)`` array with optional gradient tracking.

    The wrapped array must never be mutated after construction; all ops
    allocate new tensors.  ``grad`` is filled in by :meth:`Tape.backward`
    for leaf tensors with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are (batch, channels, height, width); got ndim={arr.ndim} "
                f"shape={arr.shape}"
            )
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape: Sequence[int], dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def full(shape: Sequence[int], value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(tuple(shape), value, dtype=dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Ops append ``(inputs, output, backward_rule)`` nodes in forward order;
    :meth:`backward` replays them in reverse, accumulating gradients in a
    fixed order so repeated runs are bit-identical.  A tensor is a *leaf*
    if it requires gradients and was not produced by a node on this tape.
    """

    def __init__(self):
        self._nodes: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _record(self, inputs: tuple[Tensor, ...], output: Tensor, bwd: Callable) -> None:
        self._nodes.append((inputs, output, bwd))
        self._produced.add(id(output))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(leaf) to every reachable requires_grad leaf.

        ``loss`` must be scalar-shaped (1,1,1,1).  Sets ``leaf.grad`` and
        returns the gradient table keyed by ``id(tensor)``.  Leaves not on
        any path to the loss keep a zero gradient (see :func:`backward`).
        """
        if loss.shape != (1, 1, 1, 1):
            raise ShapeError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for inputs, output, bwd in reversed(self._nodes):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            for t, gi in zip(inputs, bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
                if id(t) not in self._produced:
                    leaves[id(t)] = t
        for tid, t in leaves.items():
            t.grad = grads[tid]
        return grads

    def gradients(self, loss: Tensor, leaves: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients for an explicit leaf list; zeros for unreached leaves."""
        table = self.backward(loss)
        return [table.get(id(t), np.zeros_like(t.data)) for t in leaves]


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] | None = None):
    """Reverse-replay ``tape`` from a scalar ``loss``.

    With ``leaves`` given, returns one gradient array per leaf (exact zeros
    for leaves unreachable from the loss); otherwise populates ``.grad`` on
    every reachable requires_grad leaf and returns the raw table.
    """
    if leaves is not None:
        return tape.gradients(loss, leaves)
    return tape.backward(loss)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    """Attach a backward rule for ``out`` if a tape is active and needed."""
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(inputs, out, bwd)
    return out


def _fast_tensor(data: np.ndarray, requires_grad: bool) -> Tensor:
    """Internal constructor for op results known to be valid 4-D arrays."""
    t = object.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    return t


def _result(data: np.ndarray, inputs: tuple[Tensor, ...]) -> Tensor:
    rg = False
    for t in inputs:
        if t.requires_grad:
            rg = True
            break
    return _fast_tensor(data, rg)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} do not match")


def add(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("add", x, y)
    out = _result(x.data + y.data, (x, y))
    return record_op(out, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _check_same_shape("sub", x, y)
    out = _result(x.data - y.data, (x, y))
    return record_op(out, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; ``y`` may be (B,1,H,W) to broadcast over channels."""
    if x.shape != y.shape:
        bx, cx, hx, wx = x.shape
        by, cy, hy, wy = y.shape
        if not (bx == by and hx == hy and wx == wy and cy == 1):
            raise ShapeError(
                f"mul: shapes {x.shape} and {y.shape} neither match nor broadcast over channels"
            )
    xd, yd = x.data, y.data
    out = _result(xd * yd, (x, y))

    def bwd(g):
        gx = g * yd
        gy = g * xd
        if y.shape[1] == 1 and x.shape[1] != 1:
            gy = gy.sum(axis=1, keepdims=True)
        return gx, gy

    return record_op(out, (x, y), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(x.data * s, (x,))
    return record_op(out, (x,), lambda g: (g * s,))


def add_scalar(x: Tensor, s: float) -> Tensor:
    out = _result(x.data + float(s), (x,))
    return record_op(out, (x,), lambda g: (g,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    out = _result(np.abs(x.data), (x,))
    return record_op(out, (x,), lambda g: (g * sign,))


def pow_scalar(x: Tensor, p: float) -> Tensor:
    """x**p for strictly positive x (used by the robust loss, base >= eps)."""
    p = float(p)
    y = x.data ** p
    deriv = p * x.data ** (p - 1.0)
    out = _result(y, (x,))
    return record_op(out, (x,), lambda g: (g * deriv,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    slope = float(slope)
    xd = x.data
    if 0.0 <= slope <= 1.0:
        y = np.maximum(xd, xd * slope)
    else:
        y = np.where(xd < 0, xd * slope, xd)
    out = _fast_tensor(y, x.requires_grad)
    if not (out.requires_grad and _TAPE_STACK):
        return out
    neg = xd < 0

    def bwd(g):
        return (np.where(neg, g * slope, g),)

    return record_op(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign for overflow-free evaluation; output strictly in (0,1).
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _result(y, (x,))
    return record_op(out, (x,), lambda g: (g * y * (1.0 - y),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    b, _, h, w = xs[0].shape
    for t in xs[1:]:
        tb, _, th, tw = t.shape
        if (tb, th, tw) != (b, h, w):
            raise ShapeError(
                f"concat_channels: {t.shape} disagrees with {xs[0].shape} on batch/height/width"
            )
    out = _result(np.concatenate([t.data for t in xs], axis=1), tuple(xs))
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=1))

    return record_op(out, tuple(xs), bwd)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.array(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    out = _result(out_data, (x,))
    return record_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),))


def sum_channels(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,1,H,W) sum over the channel axis."""
    out = _result(x.data.sum(axis=1, keepdims=True), (x,))
    return record_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),))


def l2norm_channels(x: Tensor) -> Tensor:
    """Per-pixel Euclidean norm over channels, (B,C,H,W) -> (B,1,H,W).

    Exact 0 at zero vectors with subgradient 0 there, so a perfect
    prediction yields an exactly-zero loss.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    out = _result(norm, (x,))

    def bwd(g):
        safe = np.where(norm > 0, norm, 1.0)
        return ((g / safe) * np.where(norm > 0, x.data, 0.0),)

    return record_op(out, (x,), bwd)
