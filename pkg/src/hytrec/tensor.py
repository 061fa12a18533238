"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Every differentiable operation is a *primitive* with a registered
vector-Jacobian product (VJP). Calling a primitive inside an active
:class:`GradientTape` appends one record; :func:`backward` replays the
records in reverse order. Primitives without a registered VJP fail when
they are recorded, never by silently producing zero gradients.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "GradientTape",
    "NonFiniteError",
    "MissingDerivativeError",
    "as_tensor",
    "backward",
    "register_vjp",
    "override_vjp",
    "apply_op",
    "recording",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "exp",
    "elu_plus_one",
    "silu",
    "sum",
    "reshape",
    "transpose",
    "concat",
    "take",
    "getitem",
    "l2_normalize",
    "causal_mean",
]


class NonFiniteError(FloatingPointError):
    """A public operation produced NaN or Inf."""


class MissingDerivativeError(RuntimeError):
    """A primitive was recorded on a tape but has no VJP rule."""


class Tensor:
    """Contiguous row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64, order="C")  # keeps 0-d scalars 0-d
        self.requires_grad = requires_grad
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

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape machinery

_local = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class GradientTape:
    """Records primitives executed while the tape is active.

    Tapes are thread-local, so independent forward passes may run on
    separate threads. Nested tapes each receive every record.
    """

    def __init__(self):
        self.records: list[tuple[str, Tensor, tuple[Tensor, ...], Any]] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def __len__(self) -> int:
        return len(self.records)


_VJP: dict[str, Callable[..., Sequence[np.ndarray | None]]] = {}


def register_vjp(name: str):
    """Decorator registering ``fn(saved, out_grad) -> grads per input``."""

    def deco(fn):
        _VJP[name] = fn
        return fn

    return deco


@contextlib.contextmanager
def override_vjp(name: str, fn: Callable | None):
    """Temporarily replace (or remove, with ``None``) a VJP rule. Test hook."""
    old = _VJP.get(name)
    if fn is None:
        _VJP.pop(name, None)
    else:
        _VJP[name] = fn
    try:
        yield
    finally:
        if old is None:
            _VJP.pop(name, None)
        else:
            _VJP[name] = old


def check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


def recording(*inputs: Tensor) -> bool:
    """True when a primitive over ``inputs`` would be recorded."""
    return bool(_tape_stack()) and any(t.requires_grad for t in inputs)


def apply_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], saved: Any = None) -> Tensor:
    """Wrap a computed result and record it on every active tape."""
    check_finite(data, name)
    out = Tensor(data)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        if name not in _VJP:
            raise MissingDerivativeError(f"no derivative rule registered for {name!r}")
        out.requires_grad = True
        rec = (name, out, tuple(inputs), saved)
        for tape in stack:
            tape.records.append(rec)
    return out


def backward(tape: GradientTape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns a mapping from tensor to gradient array. With ``wrt`` given,
    every listed tensor gets an entry (exact zeros when the loss does not
    depend on it).
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for name, out, inputs, saved in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        rule = _VJP.get(name)
        if rule is None:
            raise MissingDerivativeError(f"no derivative rule registered for {name!r}")
        with np.errstate(over="ignore", invalid="ignore"):
            in_grads = rule(saved, g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            check_finite(gi, f"gradient of {name}")
            if gi.shape != t.shape:
                raise RuntimeError(f"{name}: gradient shape {gi.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = t
    result = {keep[k]: v for k, v in grads.items()}
    if wrt is not None:
        for t in wrt:
            if t not in result:
                result[t] = np.zeros_like(t.data)
    return result


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return apply_op("matmul", np.matmul(a.data, b.data), (a, b), (a.data, b.data))


@register_vjp("matmul")
def _matmul_vjp(saved, g):
    a, b = saved
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op("add", a.data + b.data, (a, b), (a.shape, b.shape))


@register_vjp("add")
def _add_vjp(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op("sub", a.data - b.data, (a, b), (a.shape, b.shape))


@register_vjp("sub")
def _sub_vjp(saved, g):
    sa, sb = saved
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op("mul", a.data * b.data, (a, b), (a.data, b.data))


@register_vjp("mul")
def _mul_vjp(saved, g):
    a, b = saved
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", -a.data, (a,))


@register_vjp("neg")
def _neg_vjp(saved, g):
    return (-g,)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return apply_op("sigmoid", y, (a,), y)


@register_vjp("sigmoid")
def _sigmoid_vjp(y, g):
    return (g * y * (1.0 - y),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        y = np.exp(a.data)
    return apply_op("exp", y, (a,), y)


@register_vjp("exp")
def _exp_vjp(y, g):
    return (g * y,)


def elu_plus_one(a) -> Tensor:
    """``elu(x) + 1``: strictly positive feature map."""
    a = as_tensor(a)
    x = a.data
    y = np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    return apply_op("elu_plus_one", y, (a,), (x, y))


@register_vjp("elu_plus_one")
def _elu1_vjp(saved, g):
    x, y = saved
    return (g * np.where(x > 0, 1.0, y),)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return apply_op("silu", a.data * s, (a,), (a.data, s))


@register_vjp("silu")
def _silu_vjp(saved, g):
    x, s = saved
    return (g * (s + x * s * (1.0 - s)),)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    return apply_op("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), (a.shape, axis, keepdims))


@register_vjp("sum")
def _sum_vjp(saved, g):
    shape, axis, keepdims = saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return apply_op("reshape", a.data.reshape(shape), (a,), a.shape)


@register_vjp("reshape")
def _reshape_vjp(shape, g):
    return (g.reshape(shape),)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    return apply_op("transpose", np.transpose(a.data, axes), (a,), axes)


@register_vjp("transpose")
def _transpose_vjp(axes, g):
    return (np.transpose(g, np.argsort(axes)),)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    return apply_op("concat", np.concatenate([t.data for t in ts], axis=axis), ts, (sizes, axis))


@register_vjp("concat")
def _concat_vjp(saved, g):
    sizes, axis = saved
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def take(table, ids) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")
    return apply_op("take", table.data[ids], (table,), (table.shape, ids))


@register_vjp("take")
def _take_vjp(saved, g):
    shape, ids = saved
    out = np.zeros(shape)
    np.add.at(out, ids.reshape(-1), g.reshape(-1, *shape[1:]))
    return (out,)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    return apply_op("getitem", np.array(a.data[idx]), (a,), (a.shape, idx))


@register_vjp("getitem")
def _getitem_vjp(saved, g):
    shape, idx = saved
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True) + eps)
    y = a.data / norm
    return apply_op("l2_normalize", y, (a,), (y, norm))


@register_vjp("l2_normalize")
def _l2n_vjp(saved, g):
    y, norm = saved
    return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)


def causal_mean(x, mask=None) -> Tensor:
    """Running mean over the sequence axis (-2), counting only valid positions.

    Position ``t`` averages the valid rows ``1..t``. Positions with no valid
    row so far get zeros.
    """
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape[:-1], dtype=bool)
    m = np.asarray(mask, dtype=np.float64)
    counts = np.cumsum(m, axis=-1)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)[..., None]
    mf = m[..., None]
    y = np.cumsum(x.data * mf, axis=-2) * inv
    return apply_op("causal_mean", y, (x,), (mf, inv))


@register_vjp("causal_mean")
def _causal_mean_vjp(saved, g):
    mf, inv = saved
    rev = np.flip(np.cumsum(np.flip(g * inv, axis=-2), axis=-2), axis=-2)
    return (rev * mf,)
