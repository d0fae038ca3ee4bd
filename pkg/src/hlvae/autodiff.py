"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When gradient recording is on
and at least one input requires a gradient, the output remembers its inputs
and a closure mapping the output cotangent to input cotangents. Calling
:func:`backward` on a scalar walks that graph in reverse topological order.

Operations that can leave their domain (``log``, ``div``, ``sqrt``, ``exp``
overflow, ...) raise :class:`~hlvae.errors.NonFiniteError` instead of
propagating ``nan``/``inf``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    FactorizationFailure,
    NonFiniteError,
    NotScalar,
    ShapeMismatch,
    SingularTriangular,
)

_state = threading.local()

JITTER_START = 1e-8
JITTER_STOP = 1e-4


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __array_priority__ = 100.0
    __array_ufunc__ = None  # make numpy defer to the reflected operators
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_finite(values: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return values


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(all="ignore"):
        out = a.data / b.data
    _check_finite(out, "div")

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back, "matmul")


# -- elementwise unary ----------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log1p(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= -1):
        raise NonFiniteError("log1p of a value <= -1")
    return _make(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),), "log1p")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _stable_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a) -> Tensor:
    """``log(1 + exp(x))`` as ``max(x, 0) + log1p(exp(-|x|))``."""
    a = as_tensor(a)
    return _make(_stable_softplus(a.data), (a,), lambda g: (g * _stable_sigmoid(a.data),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NonFiniteError("sqrt of a negative value")
    out = np.sqrt(a.data)
    if np.any(out == 0) and a.requires_grad:
        # derivative is unbounded at 0
        def back(g):
            return (_check_finite(g / (2.0 * out), "sqrt backward"),)
    else:
        def back(g):
            return (g / (2.0 * out),)
    return _make(out, (a,), back, "sqrt")


# -- reductions and shape --------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=np.float64), (a,), back, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Composed from exp/log with a detached max shift."""
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)
    out = log(sum_(exp(a - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


# -- linear algebra --------------------------------------------------------

def jittered_cholesky(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + jitter*I`` with an escalating jitter.

    The first attempt uses no jitter; after that the jitter runs from
    1e-8 to 1e-4 times the mean diagonal in factors of ten.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"cholesky expects a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise FactorizationFailure("matrix contains non-finite entries")
    n = A.shape[0]
    scale = float(np.mean(np.abs(np.diag(A)))) if n else 1.0
    if scale <= 0.0:
        scale = 1.0
    schedule = [0.0]
    jitter = JITTER_START
    while jitter <= JITTER_STOP * (1 + 1e-9):
        schedule.append(jitter * scale)
        jitter *= 10.0
    for jit in schedule:
        try:
            L = scipy.linalg.cholesky(A + jit * np.eye(n), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0):
            return L, jit
    raise FactorizationFailure(
        f"matrix of size {n} is not positive definite with jitter up to {schedule[-1]:.3g}"
    )


def _phi(X: np.ndarray) -> np.ndarray:
    out = np.tril(X)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a) -> Tensor:
    """Lower Cholesky factor of the symmetric part of ``a`` (plus jitter)."""
    a = as_tensor(a)
    sym = 0.5 * (a.data + a.data.T) if a.ndim == 2 else a.data
    L, _ = jittered_cholesky(sym)

    def back(g):
        P = _phi(L.T @ g)
        X = scipy.linalg.solve_triangular(L, P, trans="T", lower=True, check_finite=False)
        S = scipy.linalg.solve_triangular(L, X.T, trans="T", lower=True, check_finite=False).T
        return (0.5 * (S + S.T),)

    return _make(L, (a,), back, "cholesky")


def triangular_solve(L, B, lower: bool = True, transpose: bool = False) -> Tensor:
    """Solve ``op(L) X = B`` with ``op`` the identity or the transpose."""
    L, B = as_tensor(L), as_tensor(B)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeMismatch(f"triangular factor must be square, got {L.shape}")
    if B.shape[0] != L.shape[0]:
        raise ShapeMismatch(f"right-hand side has {B.shape[0]} rows, factor has {L.shape[0]}")
    if np.any(np.diag(L.data) == 0):
        raise SingularTriangular("triangular factor has a zero on its diagonal")
    trans = "T" if transpose else "N"
    X = scipy.linalg.solve_triangular(L.data, B.data, trans=trans, lower=lower, check_finite=False)
    _check_finite(X, "triangular_solve")
    tri = np.tril if lower else np.triu

    def back(g):
        gB = scipy.linalg.solve_triangular(
            L.data, g, trans="N" if transpose else "T", lower=lower, check_finite=False
        )
        g2 = gB.reshape(gB.shape[0], -1)
        X2 = X.reshape(X.shape[0], -1)
        gL = -(X2 @ g2.T) if transpose else -(g2 @ X2.T)
        return tri(gL), gB

    return _make(X, (L, B), back, "triangular_solve")


# -- backward ---------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a mapping ``leaf -> gradient``. When ``leaves`` is given, the
    mapping holds exactly those leaves, with zero arrays for leaves the root
    does not depend on.
    """
    if root.size != 1:
        raise NotScalar(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    reached = {}
    if root.requires_grad:
        for node in reversed(_topological(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                reached[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if leaves is None:
        return {node: node.grad for node in reached.values()}
    result = {}
    for leaf in leaves:
        if id(leaf) not in reached:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        result[leaf] = leaf.grad
    return result


def grad(fn: Callable, *arrays) -> list[np.ndarray]:
    """Gradients of scalar ``fn(*tensors)`` with respect to each input array."""
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in arrays]
    out = fn(*leaves)
    backward(out, leaves)
    return [leaf.grad for leaf in leaves]


def gradient_check(function: Callable, point, step: float = 1e-5, coords: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``point`` is one array or a list of arrays; ``function`` receives the
    matching tensors. ``coords`` limits the check to a random subset of that
    many coordinates.
    """
    multi = isinstance(point, (list, tuple))
    arrays = [np.array(p, dtype=np.float64) for p in (point if multi else [point])]

    def call(*xs):
        return function(*xs) if multi else function(xs[0])

    analytic = grad(call, *arrays)
    locations = [(k, i) for k, a in enumerate(arrays) for i in range(a.size)]
    if coords is not None and coords < len(locations):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(locations), size=coords, replace=False)
        locations = [locations[i] for i in sorted(picks)]
    worst = 0.0
    with no_grad():
        for k, i in locations:
            flat = arrays[k].reshape(-1)
            orig = flat[i]
            flat[i] = orig + step
            up = call(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig - step
            down = call(*[Tensor(a) for a in arrays]).item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
