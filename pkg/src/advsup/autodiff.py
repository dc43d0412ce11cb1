"""Tape-based automatic differentiation over dense float64 arrays.

Programs are plain Python callables written against the primitives in this
module (``matvec``, ``add``, ``mul``, ``scale``, ``tanh``, ``huber``,
``sum``, ``mean``, ``norm``).  Called on ordinary arrays they evaluate
eagerly; called on :class:`Var` objects inside :func:`forward` they are
recorded on a :class:`Tape` that supports reverse-mode (``vjp``) and
forward-mode (``jvp``) differentiation.

Tensors are ``numpy.ndarray`` objects of dtype float64.  A leading axis may
carry a batch of independent samples; ``matvec`` broadcasts matrices over it
so that per-sample parameter copies yield per-sample gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Var",
    "Tape",
    "as_tensor",
    "forward",
    "vjp",
    "jvp",
    "finite_difference_gradient",
    "matvec",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "tanh",
    "huber",
    "sum",
    "mean",
    "norm",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a value or derivative."""


def as_tensor(value: Any, name: str = "tensor") -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive rules.  Each primitive is (fwd, vjp, jvp) over raw arrays.
#   fwd(*args, **kw) -> out
#   vjp(g, out, *args, **kw) -> tuple of input cotangents (None = no gradient)
#   jvp(tangents, out, *args, **kw) -> output tangent (tangent None = zero)
# ---------------------------------------------------------------------------


class _Primitive:
    name = "primitive"

    @staticmethod
    def check(*args, **kw):
        pass


class _MatVec(_Primitive):
    name = "matvec"

    @staticmethod
    def check(a, x, transpose=False):
        if a.ndim not in (2, 3):
            raise ShapeError(f"matrix must be 2-D or batched 3-D, got shape {a.shape}")
        if x.ndim not in (1, 2):
            raise ShapeError(f"vector must be 1-D or batched 2-D, got shape {x.shape}")
        inner = a.shape[-2] if transpose else a.shape[-1]
        if x.shape[-1] != inner:
            raise ShapeError(
                f"matrix {a.shape}{'^T' if transpose else ''} incompatible with vector {x.shape}"
            )
        if a.ndim == 3 and (x.ndim != 2 or x.shape[0] != a.shape[0]):
            raise ShapeError(f"batched matrix {a.shape} needs vectors of batch {a.shape[0]}, got {x.shape}")

    @staticmethod
    def _mv(a, x):
        if a.ndim == 2:
            return x @ a.T
        return np.matmul(a, x[..., None])[..., 0]

    @staticmethod
    def fwd(a, x, transpose=False):
        m = np.swapaxes(a, -1, -2) if transpose else a
        return _MatVec._mv(m, x)

    @staticmethod
    def vjp(g, out, a, x, transpose=False):
        m = np.swapaxes(a, -1, -2) if transpose else a
        gx = _MatVec._mv(np.swapaxes(m, -1, -2), g)
        if m.ndim == 2 and g.ndim == 2:
            gm = g.T @ x
        elif m.ndim == 2:
            gm = np.outer(g, x)
        else:
            gm = g[:, :, None] * x[:, None, :]
        ga = np.swapaxes(gm, -1, -2) if transpose else gm
        return ga, gx

    @staticmethod
    def jvp(tangents, out, a, x, transpose=False):
        da, dx = tangents
        res = None
        if da is not None:
            dm = np.swapaxes(da, -1, -2) if transpose else da
            res = _MatVec._mv(dm, x)
        if dx is not None:
            m = np.swapaxes(a, -1, -2) if transpose else a
            t = _MatVec._mv(m, dx)
            res = t if res is None else res + t
        return res


class _Add(_Primitive):
    name = "add"

    @staticmethod
    def check(a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    @staticmethod
    def fwd(a, b):
        return a + b

    @staticmethod
    def vjp(g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    @staticmethod
    def jvp(tangents, out, a, b):
        da, db = tangents
        if da is None:
            return np.broadcast_to(db, out.shape).copy()
        if db is None:
            return np.broadcast_to(da, out.shape).copy()
        return da + db


class _Mul(_Add):
    name = "mul"

    @staticmethod
    def fwd(a, b):
        return a * b

    @staticmethod
    def vjp(g, out, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    @staticmethod
    def jvp(tangents, out, a, b):
        da, db = tangents
        res = None
        if da is not None:
            res = da * b
        if db is not None:
            t = a * db
            res = t if res is None else res + t
        return np.broadcast_to(res, out.shape).copy()


class _Scale(_Primitive):
    name = "scale"

    @staticmethod
    def fwd(a, c=1.0):
        return c * a

    @staticmethod
    def vjp(g, out, a, c=1.0):
        return (c * g,)

    @staticmethod
    def jvp(tangents, out, a, c=1.0):
        return c * tangents[0]


class _Tanh(_Primitive):
    name = "tanh"

    @staticmethod
    def fwd(a):
        return np.tanh(a)

    @staticmethod
    def vjp(g, out, a):
        return (g * (1.0 - out * out),)

    @staticmethod
    def jvp(tangents, out, a):
        return tangents[0] * (1.0 - out * out)


class _Huber(_Primitive):
    name = "huber"

    @staticmethod
    def fwd(r, delta=1.0):
        ar = np.abs(r)
        return np.where(ar <= delta, 0.5 * r * r, delta * (ar - 0.5 * delta))

    @staticmethod
    def vjp(g, out, r, delta=1.0):
        return (g * np.clip(r, -delta, delta),)

    @staticmethod
    def jvp(tangents, out, r, delta=1.0):
        return tangents[0] * np.clip(r, -delta, delta)


class _Sum(_Primitive):
    name = "sum"

    @staticmethod
    def check(a, axis=None):
        if axis is not None and not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"axis {axis} out of range for shape {a.shape}")

    @staticmethod
    def fwd(a, axis=None):
        return np.asarray(a.sum(axis=axis), dtype=np.float64)

    @staticmethod
    def vjp(g, out, a, axis=None):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    @staticmethod
    def jvp(tangents, out, a, axis=None):
        return np.asarray(tangents[0].sum(axis=axis), dtype=np.float64)


class _Mean(_Sum):
    name = "mean"

    @staticmethod
    def _count(a, axis):
        return a.size if axis is None else a.shape[axis]

    @staticmethod
    def fwd(a, axis=None):
        return np.asarray(a.sum(axis=axis) / _Mean._count(a, axis), dtype=np.float64)

    @staticmethod
    def vjp(g, out, a, axis=None):
        (full,) = _Sum.vjp(g, out, a, axis)
        return (full / _Mean._count(a, axis),)

    @staticmethod
    def jvp(tangents, out, a, axis=None):
        return np.asarray(tangents[0].sum(axis=axis) / _Mean._count(a, axis), dtype=np.float64)


class _Norm(_Primitive):
    name = "norm"

    @staticmethod
    def fwd(a):
        return np.asarray(np.sqrt(np.sum(a * a)), dtype=np.float64)

    @staticmethod
    def vjp(g, out, a):
        if out == 0.0:
            return (np.zeros_like(a),)
        return (g * a / out,)

    @staticmethod
    def jvp(tangents, out, a):
        if out == 0.0:
            return np.zeros(())
        return np.asarray(np.sum(a * tangents[0]) / out, dtype=np.float64)


# ---------------------------------------------------------------------------
# Tracing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    """One primitive application: ``values[out] = prim.fwd(values[args])``."""

    prim: type
    args: tuple
    kwargs: dict
    out: int


@dataclass
class Tape:
    """Topologically ordered record of a traced program.

    Slots ``0 .. n_inputs-1`` hold the leaves, constants get their own slots,
    every other slot is produced by exactly one node that precedes any use.
    """

    n_inputs: int
    values: list = field(default_factory=list)
    constant_slots: dict = field(default_factory=dict)
    nodes: list = field(default_factory=list)
    output: int = -1

    def _push(self, value: np.ndarray) -> int:
        self.values.append(value)
        return len(self.values) - 1

    @property
    def output_value(self) -> np.ndarray:
        return self.values[self.output]

    @property
    def input_shapes(self) -> list:
        return [self.values[i].shape for i in range(self.n_inputs)]

    def replay(self, inputs: Sequence[Any]) -> np.ndarray:
        """Re-run the recorded nodes on new leaf values."""
        if len(inputs) != self.n_inputs:
            raise ShapeError(f"tape expects {self.n_inputs} inputs, got {len(inputs)}")
        vals = list(self.values)
        for i, x in enumerate(inputs):
            x = as_tensor(x, f"input {i}")
            if x.shape != vals[i].shape:
                raise ShapeError(f"input {i}: expected shape {vals[i].shape}, got {x.shape}")
            vals[i] = x
        for k, node in enumerate(self.nodes):
            vals[node.out] = _evaluate(node.prim, [vals[a] for a in node.args], node.kwargs, k)
        return vals[self.output]

    def vjp(self, seed: Any) -> list:
        """Reverse accumulation of ``J^T seed``; one cotangent per leaf."""
        seed = np.asarray(seed, dtype=np.float64)
        out_shape = self.values[self.output].shape
        if seed.shape != out_shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {out_shape}")
        adj: dict = {self.output: seed}
        for node in reversed(self.nodes):
            g = adj.pop(node.out, None)
            if g is None:
                continue
            args = [self.values[a] for a in node.args]
            grads = node.prim.vjp(g, self.values[node.out], *args, **node.kwargs)
            for slot, ga in zip(node.args, grads):
                if ga is None or slot in self.constant_slots:
                    continue
                adj[slot] = ga if slot not in adj else adj[slot] + ga
        return [
            adj[i] if i in adj else np.zeros_like(self.values[i])
            for i in range(self.n_inputs)
        ]

    def jvp(self, tangents: Sequence[Any]) -> np.ndarray:
        """Push tangents through the recorded nodes (forward mode)."""
        tangents = _check_tangents(tangents, self.input_shapes)
        tan: dict = {i: t for i, t in enumerate(tangents)}
        for node in self.nodes:
            ts = [tan.get(a) for a in node.args]
            if all(t is None for t in ts):
                continue
            args = [self.values[a] for a in node.args]
            tan[node.out] = node.prim.jvp(ts, self.values[node.out], *args, **node.kwargs)
        out = tan.get(self.output)
        return np.zeros_like(self.output_value) if out is None else out


class Var:
    """A traced value: slot on a tape, its primal value, optional tangent."""

    __slots__ = ("tape", "slot", "value", "tangent")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, slot: int, value: np.ndarray, tangent=None):
        self.tape = tape
        self.slot = slot
        self.value = value
        self.tangent = tangent

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.value.shape})"


def _evaluate(prim, arrays, kwargs, node_index=None):
    where = f"node {node_index} ({prim.name})" if node_index is not None else prim.name
    try:
        prim.check(*arrays, **kwargs)
    except ShapeError as exc:
        raise ShapeError(f"{where}: {exc}") from None
    with np.errstate(over="ignore", invalid="ignore"):
        out = prim.fwd(*arrays, **kwargs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{where}: non-finite output")
    return out


def _apply(prim, *args, **kwargs):
    tape = None
    for a in args:
        if isinstance(a, Var):
            tape = a.tape
            break
    if tape is None:
        return _evaluate(prim, [np.asarray(a, dtype=np.float64) for a in args], kwargs)

    slots, arrays, tangents = [], [], []
    for a in args:
        if isinstance(a, Var):
            if a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            slots.append(a.slot)
            arrays.append(a.value)
            tangents.append(a.tangent)
        else:
            arr = np.asarray(a, dtype=np.float64)
            slot = tape._push(arr)
            tape.constant_slots[slot] = True
            slots.append(slot)
            arrays.append(arr)
            tangents.append(None)
    out = _evaluate(prim, arrays, kwargs, len(tape.nodes))
    slot = tape._push(out)
    tape.nodes.append(Node(prim, tuple(slots), dict(kwargs), slot))
    tangent = None
    if any(t is not None for t in tangents):
        tangent = prim.jvp(tangents, out, *arrays, **kwargs)
        if not np.all(np.isfinite(tangent)):
            raise NonFiniteError(f"node {len(tape.nodes) - 1} ({prim.name}): non-finite tangent")
    return Var(tape, slot, out, tangent)


# ---------------------------------------------------------------------------
# Primitive front-ends
# ---------------------------------------------------------------------------


def matvec(a, x, transpose: bool = False):
    """``a @ x`` (or ``a.T @ x``); batches of vectors and matrices broadcast."""
    return _apply(_MatVec, a, x, transpose=transpose)


def add(a, b):
    return _apply(_Add, a, b)


def mul(a, b):
    return _apply(_Mul, a, b)


def scale(a, c: float):
    return _apply(_Scale, a, c=float(c))


def neg(a):
    return scale(a, -1.0)


def sub(a, b):
    return add(a, scale(b, -1.0))


def tanh(a):
    return _apply(_Tanh, a)


def huber(r, delta: float = 1.0):
    """Elementwise Huber penalty: ``r**2 / 2`` inside ``|r| <= delta``, linear outside."""
    return _apply(_Huber, r, delta=float(delta))


def sum(a, axis: int | None = None):  # noqa: A001 - mirrors numpy
    return _apply(_Sum, a, axis=axis)


def mean(a, axis: int | None = None):
    return _apply(_Mean, a, axis=axis)


def norm(a):
    """Euclidean (Frobenius) norm of the whole tensor."""
    return _apply(_Norm, a)


# ---------------------------------------------------------------------------
# Program-level transforms
# ---------------------------------------------------------------------------


def _check_tangents(tangents, shapes):
    if isinstance(tangents, np.ndarray) or np.isscalar(tangents):
        tangents = [tangents]
    tangents = list(tangents)
    if len(tangents) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} tangents, got {len(tangents)}")
    out = []
    for i, (t, shape) in enumerate(zip(tangents, shapes)):
        t = as_tensor(t, f"tangent {i}")
        if t.shape != shape:
            raise ShapeError(f"tangent {i}: expected shape {shape}, got {t.shape}")
        out.append(t)
    return out


def _trace(program: Callable, inputs: Sequence[Any], tangents=None):
    tape = Tape(n_inputs=len(inputs))
    leaves = []
    for i, x in enumerate(inputs):
        arr = as_tensor(x, f"input {i}")
        slot = tape._push(arr)
        leaves.append(Var(tape, slot, arr, None if tangents is None else tangents[i]))
    out = program(*leaves)
    if not isinstance(out, Var):
        # constant program: record the output as a constant slot
        arr = np.asarray(out, dtype=np.float64)
        slot = tape._push(arr)
        tape.constant_slots[slot] = True
        out = Var(tape, slot, arr, None)
    tape.output = out.slot
    return out, tape


def forward(program: Callable, inputs: Sequence[Any]) -> tuple[np.ndarray, Tape]:
    """Evaluate ``program(*inputs)`` while recording every primitive on a tape."""
    out, tape = _trace(program, inputs)
    return out.value, tape


def vjp(tape: Tape, seed: Any) -> list:
    """Return ``J^T seed`` for each leaf of ``tape``."""
    return tape.vjp(seed)


def jvp(program: Callable, inputs: Sequence[Any], tangent: Any) -> np.ndarray:
    """Return ``J tangent`` by propagating dual numbers through ``program``.

    ``tangent`` is one array per input (a bare array is accepted when the
    program has a single input).
    """
    shapes = [np.shape(x) for x in inputs]
    tangents = _check_tangents(tangent, shapes)
    out, _ = _trace(program, inputs, tangents)
    if out.tangent is None:
        return np.zeros_like(out.value)
    return out.tangent


def finite_difference_gradient(function: Callable, point: Any, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function; a test oracle only."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    p = np.array(point, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(function(p.copy()))
        flat[i] = orig - h
        fm = float(function(p.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function is non-finite near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)
