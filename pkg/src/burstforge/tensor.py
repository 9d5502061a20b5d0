"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost open :class:`Tape`. Outside a tape
nothing is recorded, which doubles as inference mode::

    with Tape() as tape:
        loss = bf.sum(bf.mul(x, x))
    tape.backward(loss)        # or loss.backward()
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf from its inputs."""


class TapeError(RuntimeError):
    pass


def _as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
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

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("loss was not produced on an open tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended as operations run, so the list is already in
    topological order; :meth:`backward` walks it once in reverse. A tape
    can be differentiated exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.closed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs, output: Tensor, backward) -> None:
        if self.closed:
            raise TapeError("cannot record onto a tape that has been differentiated")
        output._tape = self
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if self.closed:
            raise TapeError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.closed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
                else:
                    gi = np.asarray(gi, dtype=t.dtype).reshape(t.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.nodes.clear()


def current_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def make_op(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str = "op") -> Tensor:
    """Wrap a forward result and, when a tape is open and any input needs
    gradients, record ``backward`` (grad_out -> tuple of input grads)."""
    _check_finite(out, op)
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.record(tuple(inputs), result, backward)
    return result


# ---------------------------------------------------------------- creation

def create(shape, init: str = "zeros", *, value: float = 0.0, seed: Optional[int] = None,
           fan_in: Optional[int] = None, bound: float = 1.0, dtype="f64",
           requires_grad: bool = False) -> Tensor:
    """Create a tensor with one of the supported initializers.

    ``init`` is ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (U[-bound, bound), needs ``seed``) or ``he_normal`` (N(0, 2/fan_in),
    needs ``seed`` and ``fan_in``).
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"invalid shape {shape}: extents must be >= 1")
    dt = _as_dtype(dtype)
    if init == "zeros":
        data = np.zeros(shape, dtype=dt)
    elif init == "constant":
        data = np.full(shape, value, dtype=dt)
    elif init == "uniform":
        if seed is None:
            raise ValueError("uniform init needs a seed")
        data = np.random.default_rng(seed).uniform(-bound, bound, size=shape).astype(dt)
    elif init == "he_normal":
        if seed is None or fan_in is None or fan_in < 1:
            raise ValueError("he_normal init needs a seed and fan_in >= 1")
        std = math.sqrt(2.0 / fan_in)
        data = (np.random.default_rng(seed).standard_normal(shape) * std).astype(dt)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# ------------------------------------------------------------- elementwise

def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if a.ndim != b.ndim:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")
    out = []
    for sa, sb in zip(a.shape, b.shape):
        if sa != sb and sa != 1 and sb != 1:
            raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")
        out.append(max(sa, sb))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_op(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return make_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None, *, c: float = 1.0,
                slope: float = 0.2) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, leaky_relu, sigmoid."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op == "scale":
        return scale(a, c)
    if op == "leaky_relu":
        return leaky_relu(a, slope)
    if op == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ------------------------------------------------------------------ matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast as in ``np.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _sum_leading(ga, ad.shape), _sum_leading(gb, bd.shape)

    return make_op(ad @ bd, (a, b), backward, "matmul")


def _sum_leading(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return _unbroadcast(g, shape)


# ------------------------------------------------------- structural ops

def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ax = _axis(axis, tensors[0].ndim)
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_op(out, tensors, backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _axis(axis, a.ndim)
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ValueError(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src_shape, dt = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dt)
        full[idx] = g
        return (full,)

    return make_op(a.data[idx].copy(), (a,), backward, "slice")


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.dtype)
        return make_op(out, (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")
    ax = _axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, src).copy(),)

    return make_op(out, (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return make_op(y, (a,), backward, "softmax")


def reshape_concat_slice_reduce(variant: str, *args, **kwargs) -> Tensor:
    """Name-dispatched access to the structural ops."""
    table = {"reshape": reshape, "concat": concat, "slice": slice_axis,
             "sum": sum, "softmax": softmax, "transpose": transpose}
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}")
    return table[variant](*args, **kwargs)


# ------------------------------------------------------------- grad check

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Inputs with ``requires_grad=False`` are skipped. ``max_coords`` limits
    the check to a seeded random subset of coordinates per input.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check needs f64 inputs")
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check fn must return a scalar")
    if not any(t.requires_grad for t in inputs):
        return 0.0
    tape.backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*inputs).data)
            flat[i] = orig - eps
            fm = float(fn(*inputs).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differences")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
