"""Dense float64 tensors with tape-based reverse-mode differentiation and Adam.

Only the primitives the transformer needs are provided. Every op checks the
shapes it is given and refuses to produce non-finite output.

Usage::

    with Tape() as tape:
        loss = masked_mse(model_output, target, mask)
    backward(loss, tape)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "ShapeError",
    "NumericOverflowError",
    "tensor",
    "matmul",
    "transpose",
    "softmax",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "take",
    "reshape",
    "total",
    "masked_mse",
    "backward",
    "adam_step",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class NumericOverflowError(FloatingPointError):
    pass


class Tensor:
    """A dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"tensor: empty shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    name: str


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as ops execute, so the list is topologically sorted.
    A tape is active only inside its ``with`` block; ops executed outside any
    tape are not recorded and cannot be differentiated.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.records: list[_Record] = []
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        self._outer = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.records)


def _finish(name: str, value: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(f"{name}: non-finite output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = Tape._active
    if needs and tape is not None:
        tape.records.append(_Record(out, tuple(inputs), bwd, name))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    # trailing-axes broadcasting only (bias rows, per-position tables)
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    tail = long_[len(long_) - len(short):]
    if any(s != t and s != 1 for s, t in zip(short, tail)) or (
        len(sa) == len(sb) and sa != sb
    ):
        raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")


# --------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    # batched-by-shared-matrix cases are folded into single 2-D products
    if B.ndim == 2 and A.ndim > 2:
        value = _fold_right(A, B)
    elif A.ndim == 2 and B.ndim > 2:
        value = _fold_left(A, B)
    else:
        value = np.matmul(A, B)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            if B.ndim == 2:
                ga = _fold_right(g, B.T) if g.ndim > 2 else g @ B.T
            elif A.ndim == 2:
                lead = list(range(g.ndim - 2))
                ga = np.tensordot(g, B, axes=(lead + [g.ndim - 1], lead + [B.ndim - 1]))
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif A.ndim == 2:
                gb = _fold_left(A.T, g) if g.ndim > 2 else A.T @ g
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
        return ga, gb

    return _finish("matmul", value, (a, b), bwd)


def _fold_right(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # (..., r, d) @ (d, k)
    return (A.reshape(-1, A.shape[-1]) @ B).reshape(*A.shape[:-1], B.shape[-1])


def _fold_left(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # (r, j) @ (..., j, k)
    out = np.tensordot(A, B, axes=([1], [B.ndim - 2]))
    return np.ascontiguousarray(np.moveaxis(out, 0, -2))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got {a.shape}")
    value = np.swapaxes(a.data, -1, -2)
    return _finish("transpose", value, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    value = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (value * (g - (g * value).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", value, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _finish("relu", a.data * on, (a,), lambda g: (g * on,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _finish("mul", A * B, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (column) axis."""
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: incompatible shapes {parts[0].shape} and {p.shape}")
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(x) for x in np.split(g, cuts, axis=-1))

    return _finish("concat", np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bwd)


def take(a: Tensor, index, axis: int = -2) -> Tensor:
    """Select rows (``axis=-2``) or columns (``axis=-1``) by integer index list."""
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    size = a.shape[axis]
    if idx.size == 0 or idx.min() < -size or idx.max() >= size:
        raise ShapeError(f"take: index {idx.tolist()} out of range for shape {a.shape} axis {axis}")
    value = np.take(a.data, idx, axis=axis)

    def bwd(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _finish("take", value, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _finish("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    return _finish("total", np.array([a.data.sum()]), (a,), lambda g: (np.full(a.shape, g[0]),))


def masked_mse(pred: Tensor, target, mask=None) -> Tensor:
    """Mean of squared errors over entries where ``mask`` is nonzero."""
    T = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if T.shape != pred.shape:
        raise ShapeError(f"masked_mse: incompatible shapes {pred.shape} and {T.shape}")
    M = np.ones_like(T) if mask is None else np.asarray(mask, dtype=np.float64)
    if M.shape != T.shape:
        raise ShapeError(f"masked_mse: mask shape {M.shape} does not match {T.shape}")
    count = M.sum()
    if count == 0:
        raise ShapeError("masked_mse: mask selects no entries")
    diff = (pred.data - T) * M
    value = np.array([(diff * diff).sum() / count])
    return _finish("masked_mse", value, (pred,), lambda g: (g[0] * 2.0 * diff / count,))


# --------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape, leaves: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` on every leaf that requires grad.

    Leaves on the tape but off every path to ``loss`` (and any extra
    ``leaves`` passed explicitly) receive an all-zero gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(r.out) for r in tape.records}
    leaf_map: dict[int, Tensor] = {id(t): t for t in leaves if t.requires_grad}

    for rec in reversed(tape.records):
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaf_map.setdefault(id(t), t)
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    if id(loss) not in produced and loss.requires_grad:
        leaf_map.setdefault(id(loss), loss)
    for key, t in leaf_map.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeError(f"adam_step: incompatible shapes {p.shape} and {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    backward(y, tape, leaves=[x])
    analytic = x.grad.reshape(-1)
    base = x.data.reshape(-1).copy()
    numeric = np.empty_like(base)
    for i in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[i] += step
        lo[i] -= step
        fp = f(Tensor(hi.reshape(x.shape))).item()
        fm = f(Tensor(lo.reshape(x.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
