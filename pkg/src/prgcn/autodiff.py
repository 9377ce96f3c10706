"""Minimal reverse-mode automatic differentiation over double-precision arrays.

Operations are recorded on the innermost active :class:`Tape` whenever at least
one input requires a gradient. Outside a tape every op is a plain numpy
evaluation, which is what inference code relies on.

    with Tape() as tape:
        loss = mean(relu(x @ w + b))
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class _Op:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    ops: list[_Op] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every requires-grad tensor that feeds ``loss``.

        Leaf gradients accumulate into whatever ``.grad`` already holds;
        intermediate tensors receive their gradient for this pass only.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad or not any(op.output is loss for op in reversed(self.ops)):
            raise ValueError("loss was not produced on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        produced = set()
        for op in reversed(self.ops):
            key = id(op.output)
            produced.add(key)
            g = pending.pop(key, None)
            if g is None:
                continue
            op.output.grad = g
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                k = id(t)
                tensors[k] = t
                if k in pending:
                    pending[k] = pending[k] + gi
                else:
                    pending[k] = gi
        for k, g in pending.items():
            t = tensors[k]
            if k in produced:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append(_Op(kind, inputs, out, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Core primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim == 2 and a.shape[0] == b.shape[0]:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # one GEMM over all leading rows instead of a batch of products
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, grad_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add_broadcast", a, b)
    out = a.data + b.data
    return _record(
        "add_broadcast", (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat_axis: empty input list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat_axis: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _record("concat_axis", ts, out, grad_fn)


def _extreme_reduce(kind: str, x, axis: int, keepdims: bool, pick) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{kind}: axis {axis} out of range for shape {x.shape}")
    ax = axis % x.ndim
    idx = np.expand_dims(pick(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, idx, gk, axis=ax)
        return (gx,)

    return _record(kind, (x,), out, grad_fn)


def max_reduce(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    return _extreme_reduce("max_reduce_axis", x, axis, keepdims, np.argmax)


def min_reduce(x, axis: int, keepdims: bool = False) -> Tensor:
    return _extreme_reduce("min_reduce_axis", x, axis, keepdims, np.argmin)


def mean(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.asarray(out).size, 1) if x.data.size else 1

    def grad_fn(g):
        gk = g
        if axis is not None and not keepdims:
            gk = np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape) / count,)

    return _record("mean_reduce", (x,), np.asarray(out, dtype=np.float64), grad_fn)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record("square", (x,), x.data * x.data, lambda g: (2.0 * x.data * g,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log: non-positive input (min {x.data.min():.3g})")
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sqnorm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Sum of squares along ``axis``."""
    x = as_tensor(x)
    out = np.sum(x.data * x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (2.0 * x.data * gk,)

    return _record("sqnorm", (x,), out, grad_fn)


# ---------------------------------------------------------------------------
# Structural and auxiliary ops


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), a.data * b.data, grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", (a, b), out, grad_fn)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"sqrt: non-positive input (min {x.data.min():.3g})")
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, lambda g: (0.5 * g / out,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clip", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


def sum_(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def grad_fn(g):
        gk = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return _record("sum", (x,), out, grad_fn)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index], dtype=np.float64)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("getitem", (x,), out, grad_fn)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim
    out = np.take(x.data, idx, axis=ax)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return _record("take", (x,), out, grad_fn)


def quat_to_rotmat(q) -> Tensor:
    """Map (..., 4) quaternions (w, x, y, z) to (..., 3, 3) matrices.

    The map is the homogeneous-quadratic form, so it is only a rotation for unit
    input; callers normalize first.
    """
    q = as_tensor(q)
    if q.ndim < 1 or q.shape[-1] != 4:
        raise ShapeError(f"quat_to_rotmat: expected trailing dim 4, got {q.shape}")
    w, x, y, z = (q.data[..., i] for i in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    out = np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    def grad_fn(g):
        g = [[g[..., i, j] for j in range(3)] for i in range(3)]
        gw = 2 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1])
        gx = 2 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2 * x * g[1][1] - w * g[1][2]
                  + z * g[2][0] + w * g[2][1] - 2 * x * g[2][2])
        gy = 2 * (-2 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
                  - w * g[2][0] + z * g[2][1] - 2 * y * g[2][2])
        gz = 2 * (-2 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2 * z * g[1][1]
                  + y * g[1][2] + x * g[2][0] + y * g[2][1])
        return (np.stack([gw, gx, gy, gz], axis=-1),)

    return _record("quat_to_rotmat", (q,), out, grad_fn)


def nn_sqdist(a, b) -> Tensor:
    """Squared distance from each row of ``a`` to its nearest row of ``b``.

    ``a`` is (..., n, d) and ``b`` is (..., m, d) with broadcastable leading
    dims; the result is (..., n). The neighbor is chosen on the expanded form
    ``|a|^2 + |b|^2 - 2 a.b`` (first index on ties) and the returned value is
    the exact squared difference to it, so the gradient is that of
    ``|a_i - b_j*|^2`` with ``j*`` held fixed.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"nn_sqdist: incompatible shapes {a.shape} and {b.shape}")
    if a.shape[-2] == 0 or b.shape[-2] == 0:
        raise ShapeError("nn_sqdist: empty point set")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    A = np.broadcast_to(a.data, lead + a.shape[-2:])
    B = np.broadcast_to(b.data, lead + b.shape[-2:])
    d = (np.sum(A * A, axis=-1)[..., :, None] + np.sum(B * B, axis=-1)[..., None, :]
         - 2.0 * np.matmul(A, np.swapaxes(B, -1, -2)))
    j = np.argmin(d, axis=-1)
    nearest = np.take_along_axis(B, j[..., None], axis=-2)
    diff = A - nearest
    out = np.sum(diff * diff, axis=-1)

    def grad_fn(g):
        gd = 2.0 * diff * g[..., None]
        ga = _unbroadcast(gd, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            full = np.zeros(lead + b.shape[-2:])
            flat_full = full.reshape(-1, *b.shape[-2:])
            flat_j = j.reshape(-1, j.shape[-1])
            flat_g = gd.reshape(-1, *gd.shape[-2:])
            batch = np.repeat(np.arange(flat_full.shape[0]), flat_j.shape[1])
            np.add.at(flat_full, (batch, flat_j.reshape(-1)), -flat_g.reshape(-1, gd.shape[-1]))
            gb = _unbroadcast(full, b.shape)
        return ga, gb

    return _record("nn_sqdist", (a, b), out, grad_fn)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add_broadcast": add,
    "relu": relu,
    "concat_axis": lambda *ts, axis=-1: concat(ts, axis=axis),
    "max_reduce_axis": max_reduce,
    "mean_reduce": mean,
    "square": square,
    "log": log,
    "sqnorm": sqnorm,
}

AUXILIARY: dict[str, Callable[..., Tensor]] = {
    "sub": sub,
    "mul": mul,
    "div": div,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "clip": clip,
    "sum": sum_,
    "min_reduce_axis": min_reduce,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "take": take,
    "quat_to_rotmat": quat_to_rotmat,
    "nn_sqdist": nn_sqdist,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("max_reduce_axis", [x], axis=1)``."""
    fn = PRIMITIVES.get(kind) or AUXILIARY.get(kind)
    if fn is None:
        raise KeyError(f"unknown op kind {kind!r}")
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Parameters and optimizer


class ParamStore:
    """Named learnable tensors plus the ADAM moments that belong to them."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def n_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def copy_from(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if name not in values:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamStore:
    """One bias-corrected ADAM update over every parameter; grads are zeroed after."""
    missing = [n for n, t in store.params.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for parameter {missing[0]!r}")
    store.step += 1
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    for name, t in store.params.items():
        g = t.grad
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        t.grad = np.zeros_like(t.data)
    return store


# ---------------------------------------------------------------------------
# Layer helpers


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.bias", rng.uniform(-bound, bound, size=(fan_out,)))


def linear(store: ParamStore, name: str, x) -> Tensor:
    return add(matmul(x, store[f"{name}.weight"]), store[f"{name}.bias"])


def init_mlp(store: ParamStore, prefix: str, widths: Sequence[int],
             rng: np.random.Generator) -> list[str]:
    """Create ``len(widths) - 1`` linear layers; returns their names in order."""
    names = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        name = f"{prefix}.{i}"
        init_linear(store, name, a, b, rng)
        names.append(name)
    return names


def mlp(store: ParamStore, names: Iterable[str], x, final_relu: bool = True) -> Tensor:
    names = list(names)
    for i, name in enumerate(names):
        x = linear(store, name, x)
        if final_relu or i < len(names) - 1:
            x = relu(x)
    return x
