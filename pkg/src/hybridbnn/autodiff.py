"""Define-by-run reverse-mode differentiation over numpy arrays.

Every primitive returns a :class:`Node` holding its forward value, its parent
nodes and a vector-Jacobian product closure. Calling :func:`backward` on a
scalar node walks the graph in reverse topological order and accumulates
gradients into every reachable :class:`Parameter`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from hybridbnn import numerics


class Node:
    __slots__ = ("value", "parents", "vjp", "op", "__weakref__")

    # let numpy defer to our reflected operators
    __array_priority__ = 100.0

    def __init__(self, value, parents: Sequence["Node"] = (), vjp=None, op: str = "const"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negative(self)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Node):
    """Trainable leaf.

    ``value`` is the unconstrained array that the optimizer updates. With
    ``transform="softplus"`` the model sees ``softplus(value)`` through
    :meth:`view`, which keeps the constrained quantity strictly positive.
    """

    __slots__ = ("name", "transform", "grad")

    def __init__(self, name: str, value, transform: str = "identity"):
        if transform not in ("identity", "softplus"):
            raise ValueError(f"unknown transform {transform!r}")
        super().__init__(np.array(value, dtype=np.float64), op="param")
        self.name = name
        self.transform = transform
        self.grad = np.zeros_like(self.value)

    @classmethod
    def positive(cls, name: str, constrained_value) -> "Parameter":
        return cls(name, inverse_softplus(np.asarray(constrained_value, dtype=np.float64)), "softplus")

    def view(self) -> Node:
        return softplus(self) if self.transform == "softplus" else self

    def constrained(self) -> np.ndarray:
        return softplus_value(self.value) if self.transform == "softplus" else self.value.copy()

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ValueError(f"{self.name}: shape {value.shape} != {self.value.shape}")
        self.value = value.copy()

    def assign_constrained(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        self.assign(inverse_softplus(value) if self.transform == "softplus" else value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, transform={self.transform!r})"


def const(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def softplus_value(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.log1p(np.exp(np.clip(x, -30.0, 30.0)))
    out = np.where(x > 30.0, x, out)
    return np.where(x < -30.0, np.exp(np.minimum(x, -30.0)), out)


def inverse_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs strictly positive values")
    # log(expm1(y)) loses precision for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid_value(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Node, b: Node, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Node:
    a, b = const(a), const(b)
    _check_broadcast(a, b, "add")
    return Node(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def subtract(a, b) -> Node:
    a, b = const(a), const(b)
    _check_broadcast(a, b, "subtract")
    return Node(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "subtract")


def multiply(a, b) -> Node:
    a, b = const(a), const(b)
    _check_broadcast(a, b, "multiply")
    return Node(a.value * b.value, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
                "multiply")


def divide(a, b) -> Node:
    a, b = const(a), const(b)
    _check_broadcast(a, b, "divide")
    out = a.value / b.value
    return Node(out, (a, b),
                lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
                "divide")


def negative(a) -> Node:
    a = const(a)
    return Node(-a.value, (a,), lambda g: (-g,), "negative")


def _unary(name: str, fwd: Callable, dfwd: Callable):
    def op(a) -> Node:
        a = const(a)
        out = fwd(a.value)
        return Node(out, (a,), lambda g: (g * dfwd(a.value, out),), name)

    op.__name__ = name
    return op


relu = _unary("relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))
softplus = _unary("softplus", softplus_value, lambda x, y: sigmoid_value(x))
exp = _unary("exp", np.exp, lambda x, y: y)
log = _unary("log", np.log, lambda x, y: 1.0 / x)
square = _unary("square", np.square, lambda x, y: 2.0 * x)
sqrt = _unary("sqrt", np.sqrt, lambda x, y: 0.5 / y)
sin = _unary("sin", np.sin, lambda x, y: np.cos(x))
cos = _unary("cos", np.cos, lambda x, y: -np.sin(x))


def _darccos(x, y):
    r = 1.0 - x * x
    # the clamp region and the singular endpoints carry no gradient
    return np.where(r > 1e-14, -1.0 / np.sqrt(np.maximum(r, 1e-14)), 0.0)


arccos = _unary("arccos", np.arccos, _darccos)


def power(a, p: float) -> Node:
    a = const(a)
    out = a.value ** p
    return Node(out, (a,), lambda g: (g * p * a.value ** (p - 1),), "power")


def clip(a, lo: float, hi: float) -> Node:
    a = const(a)
    mask = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return Node(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,), "clip")


# shape and reduction -----------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Node:
    a = const(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(out, (a,), vjp, "reduce_sum")


def reduce_mean(a, axis=None, keepdims: bool = False) -> Node:
    a = const(a)
    n = a.value.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def transpose(a) -> Node:
    a = const(a)
    return Node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Node:
    a = const(a)
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Node:
    a = const(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), vjp, "take")


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes,
                lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def diag_part(a) -> Node:
    a = const(a)
    return Node(np.diagonal(a.value).copy(), (a,),
                lambda g: (np.diag(g) if a.shape[0] == a.shape[1] else _pad_diag(g, a.shape),), "diag_part")


def _pad_diag(g, shape):
    out = np.zeros(shape)
    idx = np.arange(len(g))
    out[idx, idx] = g
    return out


def diag_embed(v) -> Node:
    v = const(v)
    return Node(np.diag(v.value), (v,), lambda g: (np.diagonal(g).copy(),), "diag_embed")


def strict_lower(a) -> Node:
    a = const(a)
    return Node(np.tril(a.value, -1), (a,), lambda g: (np.tril(g, -1),), "strict_lower")


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return Node(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


# linear algebra ----------------------------------------------------------------


def cholesky(a) -> Node:
    """Differentiable Cholesky factor.

    The adjoint assumes ``a`` is symmetric and returns a symmetric gradient.
    """
    a = const(a)
    L = numerics.cholesky(a.value)

    def vjp(g):
        P = L.T @ g
        P = np.tril(P) - 0.5 * np.diag(np.diag(P))
        # L^{-T} P L^{-1}
        X = solve_triangular(L, P.T, lower=True, trans="T", check_finite=False)
        X = solve_triangular(L, X.T, lower=True, trans="T", check_finite=False)
        return (0.5 * (X + X.T),)

    return Node(L, (a,), vjp, "cholesky")


def jittered_cholesky(a) -> tuple[Node, float]:
    """Cholesky of ``a + c * mean(diag(a)) * I`` with ``c`` from the jitter schedule.

    The jitter is built into the graph so its dependence on ``a`` is
    differentiated too; the schedule step ``c`` is chosen on the forward value.
    """
    a = const(a)
    n = a.shape[0]
    _, jitter = numerics.jittered_cholesky(a.value)
    scale = numerics.jitter_scale(a.value)
    rel = jitter / scale
    if np.mean(np.abs(np.diag(a.value))) > 0.0:
        shift = reduce_mean(diag_part(a)) * rel
        jittered = a + shift * np.eye(n)
    else:
        jittered = a + jitter * np.eye(n)
    return cholesky(jittered), jitter


def solve_lower(L, B) -> Node:
    """Differentiable ``L^{-1} B`` for lower-triangular ``L``."""
    L, B = const(L), const(B)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[1] != B.shape[0]:
        raise ValueError(f"solve_lower: incompatible shapes {L.shape} and {B.shape}")
    X = numerics.solve_lower(L.value, B.value)

    def vjp(g):
        gB = numerics.solve_upper_t(L.value, g)
        if X.ndim == 1:
            gL = -np.tril(np.outer(gB, X))
        else:
            gL = -np.tril(gB @ X.T)
        return (gL, gB)

    return Node(X, (L, B), vjp, "solve_lower")


def solve_lower_t(L, B) -> Node:
    """Differentiable ``L^{-T} B`` for lower-triangular ``L``."""
    L, B = const(L), const(B)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[0] != B.shape[0] or B.ndim != 2:
        raise ValueError(f"solve_lower_t: incompatible shapes {L.shape} and {B.shape}")
    X = numerics.solve_upper_t(L.value, B.value)

    def vjp(g):
        gB = numerics.solve_lower(L.value, g)
        return (-np.tril(X @ gB.T), gB)

    return Node(X, (L, B), vjp, "solve_lower_t")


def log_det_from_chol(L) -> Node:
    L = const(L)
    d = np.diag(L.value)
    return Node(numerics.log_det_from_chol(L.value), (L,), lambda g: (np.diag(2.0 * g / d),), "log_det_from_chol")


PRIMITIVES = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "matmul": matmul,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "cholesky": cholesky,
    "solve_lower": solve_lower,
    "solve_lower_t": solve_lower_t,
    "log_det_from_chol": log_det_from_chol,
    "negative": negative,
    "transpose": transpose,
    "sin": sin,
    "cos": cos,
    "arccos": arccos,
}


def record(op: str, *inputs, **kwargs) -> Node:
    """Apply primitive ``op`` by name and return its node."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# backward pass -----------------------------------------------------------------


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> list[Parameter]:
    """Accumulate d(root)/d(param) into ``param.grad`` for every reachable Parameter.

    Returns the parameters that were reached.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.value)}
    reached = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + np.reshape(g, node.shape)
            reached.append(node)
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            pg = np.reshape(pg, parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return reached


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def grad(fn: Callable[[], Node], params: Sequence[Parameter]) -> list[np.ndarray]:
    """Fresh gradients of ``fn()`` with respect to ``params``."""
    zero_grads(params)
    backward(fn())
    return [p.grad.copy() for p in params]
