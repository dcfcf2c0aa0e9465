"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every primitive goes through :func:`apply_primitive`. When any input requires
a gradient, the application is appended to the active :class:`Tape`, and
:func:`backward` walks that tape in reverse, accumulating vector-Jacobian
products into the leaves.

Binary elementwise primitives accept operands of equal shape, a scalar
operand, or an operand whose shape equals the other's shape minus the
leading batch dimension. Anything else has to go through ``broadcast``.

At the kinks of ``abs`` and ``leaky_relu`` the right-hand derivative is used.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NumericError",
    "apply_primitive",
    "backward",
    "no_grad",
    "finite_difference_check",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager to scope recording to one step; otherwise ops
    land on a module-level default tape.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def record(self, kind, inputs, output, vjp) -> int:
        if self.consumed:
            raise RuntimeError("tape was consumed by backward(); call reset() or open a new Tape")
        self.nodes.append(_Node(kind, inputs, output, vjp))
        return len(self.nodes) - 1


class _Node:
    __slots__ = ("kind", "inputs", "output", "vjp")

    def __init__(self, kind, inputs, output, vjp):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_TAPE_STACK: list[Tape] = []
_DEFAULT = [Tape()]
_GRAD_ENABLED = [True]


def _active_tape() -> Tape:
    if _TAPE_STACK:
        return _TAPE_STACK[-1]
    if _DEFAULT[0].consumed:
        _DEFAULT[0] = Tape()
    return _DEFAULT[0]


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on a tape."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    """A float64 array, optionally a leaf that accumulates gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self) -> int | None:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    # operator sugar
    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other)])

    def __radd__(self, other):
        return apply_primitive("add", [_as_tensor(other), self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, _as_tensor(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [_as_tensor(other), self])

    def __mul__(self, other):
        return apply_primitive("mul", [self, _as_tensor(other)])

    def __rmul__(self, other):
        return apply_primitive("mul", [_as_tensor(other), self])

    def __truediv__(self, other):
        return apply_primitive("div", [self, _as_tensor(other)])

    def __rtruediv__(self, other):
        return apply_primitive("div", [_as_tensor(other), self])

    def __neg__(self):
        return apply_primitive("neg", [self])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _as_tensor(other)])

    def __getitem__(self, key):
        return apply_primitive("slice", [self], {"key": key})

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], {"axis": axis, "keepdims": keepdims})

    def exp(self):
        return apply_primitive("exp", [self])

    def log(self):
        return apply_primitive("log", [self])

    def square(self):
        return apply_primitive("square", [self])

    def abs(self):
        return apply_primitive("abs", [self])

    def sqrt(self):
        return apply_primitive("sqrt", [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": shape})


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._from_op(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitive table: kind -> fn(inputs data, attrs) -> (output, vjp or None)
# vjp(g) returns one gradient array (or None) per input.


def _batch_compatible(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == len(sb) + 1 and sa[1:] == sb:
        return
    if len(sb) == len(sa) + 1 and sb[1:] == sa:
        return
    raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def _p_add(x, attrs):
    a, b = x
    _batch_compatible("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _p_sub(x, attrs):
    a, b = x
    _batch_compatible("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _p_mul(x, attrs):
    a, b = x
    _batch_compatible("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _p_div(x, attrs):
    a, b = x
    _batch_compatible("div", a, b)
    if np.any(b == 0):
        raise DomainError("div: division by zero")
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _p_neg(x, attrs):
    return -x[0], lambda g: (-g,)


def _p_matmul(x, attrs):
    a, b = x
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def _p_exp(x, attrs):
    out = np.exp(x[0])
    return out, lambda g: (g * out,)


def _p_log(x, attrs):
    a = x[0]
    if np.any(a <= 0):
        raise DomainError(f"log: non-positive input (min {a.min():.3g})")
    return np.log(a), lambda g: (g / a,)


def _p_square(x, attrs):
    a = x[0]
    return a * a, lambda g: (2.0 * a * g,)


def _p_abs(x, attrs):
    a = x[0]
    return np.abs(a), lambda g: (np.where(a >= 0, g, -g),)


def _p_sqrt(x, attrs):
    a = x[0]
    if np.any(a <= 0):
        raise DomainError(f"sqrt: non-positive input (min {a.min():.3g})")
    out = np.sqrt(a)
    return out, lambda g: (0.5 * g / out,)


def _p_sum(x, attrs):
    a = x[0]
    axis = attrs.get("axis")
    keep = attrs.get("keepdims", False)
    out = np.sum(a, axis=axis, keepdims=keep)

    def vjp(g):
        if axis is not None and not keep:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.asarray(out), vjp


def _p_mean(x, attrs):
    a = x[0]
    axis = attrs.get("axis")
    keep = attrs.get("keepdims", False)
    out = np.mean(a, axis=axis, keepdims=keep)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keep:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return np.asarray(out), vjp


def _p_broadcast(x, attrs):
    a = x[0]
    shape = tuple(attrs["shape"])
    try:
        out = np.broadcast_to(a, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    lead = len(shape) - a.ndim
    stretched = tuple(i + lead for i, s in enumerate(a.shape) if s == 1 and shape[i + lead] != 1)

    def vjp(g):
        g = g.sum(axis=tuple(range(lead)) + stretched, keepdims=True) if (lead or stretched) else g
        return (g.reshape(a.shape),)

    return out.copy(), vjp


def _p_reshape(x, attrs):
    a = x[0]
    try:
        out = a.reshape(attrs["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(attrs['shape'])}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _p_concat(x, attrs):
    axis = attrs.get("axis", -1)
    ref = x[0]
    ax = axis % ref.ndim if ref.ndim else 0
    for other in x[1:]:
        if other.ndim != ref.ndim or any(
            s != t for i, (s, t) in enumerate(zip(ref.shape, other.shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {other.shape}")
    out = np.concatenate(x, axis=ax)
    splits = np.cumsum([a.shape[ax] for a in x])[:-1]
    return out, lambda g: tuple(np.split(g, splits, axis=ax))


def _p_slice(x, attrs):
    a = x[0]
    key = attrs["key"]
    try:
        out = a[key]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {a.shape}") from None
    out = np.array(out, dtype=np.float64)

    def vjp(g):
        full = np.zeros_like(a)
        np.add.at(full, key, g)
        return (full,)

    return out, vjp


def _p_leaky_relu(x, attrs):
    a = x[0]
    slope = attrs.get("slope", 0.01)
    pos = a >= 0
    out = np.where(pos, a, slope * a)
    return out, lambda g: (np.where(pos, g, slope * g),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _p_sigmoid(x, attrs):
    out = _sigmoid(x[0])
    return out, lambda g: (g * out * (1.0 - out),)


def _p_softplus(x, attrs):
    a = x[0]
    return np.logaddexp(0.0, a), lambda g: (g * _sigmoid(a),)


def _p_tanh(x, attrs):
    out = np.tanh(x[0])
    return out, lambda g: (g * (1.0 - out * out),)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _p_matmul,
    "add": _p_add,
    "sub": _p_sub,
    "mul": _p_mul,
    "div": _p_div,
    "neg": _p_neg,
    "exp": _p_exp,
    "log": _p_log,
    "square": _p_square,
    "abs": _p_abs,
    "sqrt": _p_sqrt,
    "sum": _p_sum,
    "mean": _p_mean,
    "broadcast": _p_broadcast,
    "reshape": _p_reshape,
    "concat": _p_concat,
    "slice": _p_slice,
    "leaky_relu": _p_leaky_relu,
    "sigmoid": _p_sigmoid,
    "softplus": _p_softplus,
    "tanh": _p_tanh,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply one primitive and record it when any input is tracked."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    attrs = attrs or {}
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, vjp = fn([t.data for t in inputs], attrs)
    if not np.isfinite(out).all():
        raise NumericError(f"{kind}: produced non-finite values")
    result = Tensor._from_op(out)
    if _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs):
        tape = _active_tape()
        result.requires_grad = True
        result._tape = tape
        result._node = tape.record(kind, tuple(inputs), result, vjp)
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Consumes the tape that recorded ``loss``; a second call raises.
    """
    if loss.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("backward: loss is not attached to a tape")
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed; reset before calling again")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss._node] = np.ones(())
    for i in range(loss._node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        node.output.grad = g
        with np.errstate(over="ignore", invalid="ignore"):
            in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._tape is tape:
                j = inp._node
                grads[j] = ig if grads[j] is None else grads[j] + ig
            elif inp._node is None:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += ig
        grads[i] = None
    tape.consumed = True
    tape.nodes = []


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Relative error per coordinate is ``|a - c| / (|a| + |c| + 1e-12)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with no_grad():
        f0 = fn(Tensor(base)).data
        f1 = fn(Tensor(base)).data
    if np.shape(f0) != ():
        raise ShapeError(f"finite_difference_check: fn must be scalar-valued, got shape {np.shape(f0)}")
    if not np.array_equal(f0, f1):
        raise RuntimeError("finite_difference_check: fn is not deterministic")

    leaf = Tensor(base, requires_grad=True)
    with Tape():
        backward(fn(leaf))
    analytic = leaf.grad

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for idx in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[idx] += step
        with no_grad():
            up = fn(Tensor(shifted.reshape(base.shape))).item()
        shifted[idx] -= 2 * step
        with no_grad():
            down = fn(Tensor(shifted.reshape(base.shape))).item()
        flat[idx] = (up - down) / (2 * step)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# functional helpers composed from primitives


def matmul(a, b):
    return apply_primitive("matmul", [_as_tensor(a), _as_tensor(b)])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def square(x):
    return apply_primitive("square", [x])


def tanh(x):
    return apply_primitive("tanh", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def softplus(x):
    return apply_primitive("softplus", [x])


def leaky_relu(x, slope: float = 0.01):
    return apply_primitive("leaky_relu", [x], {"slope": slope})


def concat(tensors: Iterable[Tensor], axis: int = -1):
    return apply_primitive("concat", [_as_tensor(t) for t in tensors], {"axis": axis})


def broadcast(x, shape):
    return apply_primitive("broadcast", [_as_tensor(x)], {"shape": tuple(shape)})


def logsumexp(x: Tensor, axis: int) -> Tensor:
    """Stable log-sum-exp along ``axis``; the shift is a constant."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    summed = (x - broadcast(Tensor._from_op(shift), x.shape)).exp().sum(axis=axis)
    return summed.log() + Tensor._from_op(np.squeeze(shift, axis=axis))


LOG_2PI = math.log(2.0 * math.pi)
