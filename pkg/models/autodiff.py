"""
Reverse-mode automatic differentiation over array-valued computation graphs.

A ``Tape`` records every elementary operation applied to ``Var`` objects in
topological order. Each node keeps the indices of its parents together with a
vector-Jacobian product per parent. ``backward`` walks the nodes in strictly
decreasing index order and returns the gradient of a scalar loss with respect
to every parameter slot registered on the tape.

All math helpers in this module (``exp``, ``sin``, ``matmul``, ``mean``...)
accept either plain numpy arrays or ``Var`` objects. Plain inputs are evaluated
with numpy directly and nothing is recorded, so the same coefficient function
serves untaped evaluation rollouts and taped training rollouts, with identical
forward values.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import NonFiniteError

ArrayLike = Union[np.ndarray, float, int]


@dataclass(frozen=True)
class Node:
    kind: str
    parents: Tuple[int, ...]
    vjps: Tuple[Callable[[np.ndarray], np.ndarray], ...]


class Tape:
    """Append-only record of a computation."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.values: List[np.ndarray] = []
        self.slots: List[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        kind: str,
        value: np.ndarray,
        parents: Sequence[int] = (),
        vjps: Sequence[Callable[[np.ndarray], np.ndarray]] = (),
    ) -> "Var":
        value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(kind)
        index = len(self.nodes)
        # parents always precede their children
        assert all(p < index for p in parents)
        self.nodes.append(Node(kind, tuple(parents), tuple(vjps)))
        self.values.append(value)
        return Var(self, index)

    def constant(self, value: ArrayLike) -> "Var":
        return self.record("const", np.array(value, dtype=float))

    def parameter(self, value: ArrayLike) -> "Var":
        var = self.record("param", np.array(value, dtype=float))
        self.slots.append(var.index)
        return var

    def slot_sizes(self) -> List[int]:
        return [self.values[s].size for s in self.slots]


class Var:
    """Handle on one node of a tape."""

    __slots__ = ("tape", "index")
    # let numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, {self.value!r})"

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

    def __pow__(self, power: int):
        return powi(self, power)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    """Forward value of a Var, or the argument itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def lift(tape: Tape, value: ArrayLike, parameter: bool = False) -> Var:
    """Put a constant (no gradient) or a parameter slot on the tape."""
    if isinstance(value, Var):
        return value
    return tape.parameter(value) if parameter else tape.constant(value)


def _tape_of(*args) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _record(
    kind: str,
    value: np.ndarray,
    inputs: Sequence,
    vjps: Sequence[Callable[[np.ndarray], np.ndarray]],
) -> Var:
    tape = _tape_of(*inputs)
    parents, kept = [], []
    for x, vjp in zip(inputs, vjps):
        if isinstance(x, Var):
            if x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            parents.append(x.index)
            kept.append(vjp)
    return tape.record(kind, value, parents, kept)


def _binary(kind: str, a, b, fn, grad_a, grad_b):
    if _tape_of(a, b) is None:
        return fn(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    av, bv = value_of(a), value_of(b)
    with np.errstate(all="ignore"):
        out = fn(av, bv)
    return _record(
        kind,
        out,
        (a, b),
        (
            lambda g: _unbroadcast(grad_a(g, av, bv, out), av.shape),
            lambda g: _unbroadcast(grad_b(g, av, bv, out), bv.shape),
        ),
    )


def _unary(kind: str, x, fn, grad):
    if not isinstance(x, Var):
        return fn(np.asarray(x, dtype=float))
    xv = x.value
    with np.errstate(all="ignore"):
        out = fn(xv)
    return _record(kind, out, (x,), (lambda g: grad(g, xv, out),))


# -- elementwise -------------------------------------------------------------


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    return _binary(
        "sub", a, b, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g
    )


def mul(a, b):
    return _binary(
        "mul", a, b, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a
    )


def div(a, b):
    if _tape_of(a, b) is not None and np.any(value_of(b) == 0.0):
        raise NonFiniteError("div", "division by zero")
    return _binary(
        "div",
        a,
        b,
        np.divide,
        lambda g, a, b, o: g / b,
        lambda g, a, b, o: -g * a / (b * b),
    )


def neg(x):
    return _unary("neg", x, np.negative, lambda g, x, o: -g)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, x, o: g * o)


def sin(x):
    return _unary("sin", x, np.sin, lambda g, x, o: g * np.cos(x))


def cos(x):
    return _unary("cos", x, np.cos, lambda g, x, o: -g * np.sin(x))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda g, x, o: g * o * (1.0 - o))


def relu(x):
    # relu'(0) := 0
    return _unary(
        "relu", x, lambda v: np.maximum(v, 0.0), lambda g, x, o: g * (x > 0.0)
    )


def sqrt(x):
    if isinstance(x, Var) and np.any(x.value < 0.0):
        raise NonFiniteError("sqrt", "negative argument")
    return _unary("sqrt", x, np.sqrt, lambda g, x, o: g / (2.0 * o))


def atan(x):
    return _unary("atan", x, np.arctan, lambda g, x, o: g / (1.0 + x * x))


def abs_(x):
    return _unary("abs", x, np.abs, lambda g, x, o: g * np.sign(x))


def powi(x, n: int):
    if int(n) != n:
        raise ValueError("powi expects an integer exponent")
    n = int(n)
    return _unary(
        "powi", x, lambda v: v**n, lambda g, x, o: g * n * x ** (n - 1)
    )


def minimum(a, b):
    # ties go to the first argument
    return _binary(
        "min",
        a,
        b,
        np.minimum,
        lambda g, a, b, o: g * (a <= b),
        lambda g, a, b, o: g * (a > b),
    )


def maximum(a, b):
    return _binary(
        "max",
        a,
        b,
        np.maximum,
        lambda g, a, b, o: g * (a >= b),
        lambda g, a, b, o: g * (a < b),
    )


def clip(x, lo, hi):
    """Clamp with gradient 1 inside [lo, hi] (inclusive) and 0 outside."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return _unary(
        "clip",
        x,
        lambda v: np.clip(v, lo, hi),
        lambda g, x, o: g * ((x >= lo) & (x <= hi)),
    )


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _binary(
        "where",
        a,
        b,
        lambda a, b: np.where(cond, a, b),
        lambda g, a, b, o: np.where(cond, g, 0.0),
        lambda g, a, b, o: np.where(cond, 0.0, g),
    )


def sign(x) -> np.ndarray:
    """Sign of the forward value; carries no gradient."""
    return np.sign(value_of(x))


# -- reductions and shape ops -----------------------------------------------


def sum_(x, axis=None, keepdims: bool = False):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    xv = x.value

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _record("sum", np.sum(xv, axis=axis, keepdims=keepdims), (x,), (vjp,))


def mean(x, axis=None, keepdims: bool = False):
    """Average; over axis 0 of a particle block this is the empirical mean."""
    if not isinstance(x, Var):
        return np.mean(x, axis=axis, keepdims=keepdims)
    xv = x.value
    count = xv.size if axis is None else xv.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, xv.shape).copy()

    return _record("mean", np.mean(xv, axis=axis, keepdims=keepdims), (x,), (vjp,))


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    xv = x.value
    return _record(
        "reshape", np.reshape(xv, shape), (x,), (lambda g: g.reshape(xv.shape),)
    )


def transpose(x):
    """Swap the last two axes."""
    if not isinstance(x, Var):
        return np.swapaxes(x, -1, -2)
    return _record(
        "transpose",
        np.swapaxes(x.value, -1, -2),
        (x,),
        (lambda g: np.swapaxes(g, -1, -2),),
    )


def getitem(x, idx):
    if not isinstance(x, Var):
        return np.asarray(x)[idx]
    xv = x.value

    def vjp(g):
        out = np.zeros_like(xv)
        np.add.at(out, idx, g)
        return out

    return _record("getitem", xv[idx], (x,), (vjp,))


def concat(parts: Sequence, axis: int = -1):
    if _tape_of(*parts) is None:
        return np.concatenate([np.asarray(p, dtype=float) for p in parts], axis=axis)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def make_vjp(k):
        return lambda g: np.split(g, bounds, axis=axis)[k]

    return _record("concat", out, parts, [make_vjp(k) for k in range(len(parts))])


def matmul(a, b):
    """Batched matrix product with numpy broadcasting (operands ndim >= 2)."""
    if _tape_of(a, b) is None:
        return np.matmul(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    return _binary(
        "matmul",
        a,
        b,
        np.matmul,
        lambda g, a, b, o: np.matmul(g, np.swapaxes(b, -1, -2)),
        lambda g, a, b, o: np.matmul(np.swapaxes(a, -1, -2), g),
    )


# -- gradients ----------------------------------------------------------------


def gradients(tape: Tape, loss: Var) -> List[np.ndarray]:
    """Per-slot gradients of a scalar loss, in slot registration order."""
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ValueError("loss must be a Var recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    adjoints: List[Optional[np.ndarray]] = [None] * len(tape.nodes)
    adjoints[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = adjoints[i]
        if g is None:
            continue
        node = tape.nodes[i]
        for parent, vjp in zip(node.parents, node.vjps):
            contribution = vjp(g)
            if adjoints[parent] is None:
                adjoints[parent] = contribution
            else:
                adjoints[parent] = adjoints[parent] + contribution
    return [
        adjoints[s] if adjoints[s] is not None else np.zeros_like(tape.values[s])
        for s in tape.slots
    ]


def backward(tape: Tape, loss: Var) -> np.ndarray:
    """Flat gradient over all parameter slots (concatenated, C order)."""
    grads = gradients(tape, loss)
    if not grads:
        return np.zeros(0)
    return np.concatenate([g.ravel() for g in grads])
