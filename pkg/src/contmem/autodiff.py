"""Dense float64 tensors with reverse-mode differentiation.

A small tape: every operation returns a new Tensor holding its inputs and a
closure that maps the output gradient to input gradients.  `backward()` on a
scalar walks the tape in reverse topological order.  Only what the rest of
the package needs is implemented; shapes are plain tuples and broadcasting
follows numpy semantics with gradients summed back over broadcast axes.
"""

from __future__ import annotations

import re

import numpy as np
import scipy.linalg
from scipy.special import erf as _erf, expit as _expit


class DiffError(Exception):
    """Base class for tensor/graph errors."""


class ShapeError(DiffError):
    """Operand shapes are incompatible for the requested operation."""


class UnknownOpError(DiffError):
    """An elementwise op-id that has no registered kernel."""


class NotSPDError(DiffError):
    """Cholesky factorization failed: the matrix is not positive definite."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (leading minor {pivot})")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` back down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powi(self, p)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bw(g, out):
            gi = np.zeros_like(self.data)
            gi[idx] = g
            return (gi,)

        return _make(out_data, (self,), bw)

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.data.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g.reshape(node.data.shape)
                continue
            for parent, pg in zip(node._parents, node._backward(g, node.data)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


# -- core ops ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g, o: (_unbroadcast(g, a.data.shape),
                                            _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g, o: (_unbroadcast(g, a.data.shape),
                                            _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g, o: (_unbroadcast(g * b.data, a.data.shape),
                                            _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g, o: (_unbroadcast(g / b.data, a.data.shape),
                               _unbroadcast(-g * a.data / b.data ** 2, b.data.shape)))


def powi(a: Tensor, p: float) -> Tensor:
    a = _wrap(a)
    out = a.data ** p
    return _make(out, (a,), lambda g, o: (g * p * a.data ** (p - 1),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g, o: (g @ b.data.T, a.data.T @ g))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, o):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, o: (g * o,))


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g, o: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g, o: (g * 0.5 / o,))


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _expit(a.data)
    return _make(out, (a,), lambda g, o: (g * o * (1.0 - o),))


def softplus(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g, o: (g * _expit(a.data),))


def erf(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = _erf(a.data)
    return _make(out, (a,),
                 lambda g, o: (g * (2.0 / np.sqrt(np.pi)) * np.exp(-a.data ** 2),))


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g, o: (g * (1.0 - o ** 2),))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit; smooth, so finite differences behave."""
    a = _wrap(a)
    x = a.data
    phi = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    out = x * phi

    def bw(g, o):
        pdf = np.exp(-0.5 * x ** 2) / np.sqrt(2.0 * np.pi)
        return (g * (phi + x * pdf),)

    return _make(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g, o: (g.reshape(a.data.shape),))


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _make(a.data.T, (a,), lambda g, o: (g.T,))


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, o):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw)


def take(a: Tensor, indices, axis=0) -> Tensor:
    """Gather rows (or slices along `axis`); backward scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def bw(g, o):
        gi = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(gi, idx, g)
        else:
            gm = np.moveaxis(g, axis, 0)
            gim = np.moveaxis(gi, axis, 0)
            np.add.at(gim, idx, gm)
        return (gi,)

    return _make(out, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g, o):
        return (o * (g - (g * o).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse

    def bw(g, o):
        p = np.exp(o)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw)


def stopgrad(a: Tensor) -> Tensor:
    """Blocks gradient flow: the result is a constant copy of `a`."""
    a = _wrap(a)
    return Tensor(a.data.copy())


# -- SPD solver --------------------------------------------------------------

_MINOR_RE = re.compile(r"(\d+)-th leading minor")


def solve_spd(a, y):
    """Solve A X = Y for symmetric positive definite A via Cholesky.

    Accepts Tensors or arrays; the result does not carry gradients (callers
    treat the solve as a precomputed constant operator).
    """
    a_data = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    y_data = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if a_data.ndim != 2 or a_data.shape[0] != a_data.shape[1]:
        raise ShapeError(f"solve_spd needs a square matrix, got {a_data.shape}")
    if y_data.shape[0] != a_data.shape[0]:
        raise ShapeError(f"solve_spd rhs rows {y_data.shape} mismatch A {a_data.shape}")
    try:
        c, low = scipy.linalg.cho_factor(a_data, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        m = _MINOR_RE.search(str(e))
        raise NotSPDError(int(m.group(1)) if m else -1) from e
    x = scipy.linalg.cho_solve((c, low), y_data, check_finite=False)
    if isinstance(a, Tensor) or isinstance(y, Tensor):
        return Tensor(x)
    return x


# -- elementwise dispatch ----------------------------------------------------

_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "erf": erf,
    "tanh": tanh,
    "gelu": gelu,
}


def elementwise(op_id: str, *inputs) -> Tensor:
    """Apply a named elementwise kernel; unknown ids raise UnknownOpError."""
    try:
        fn = _ELEMENTWISE[op_id]
    except KeyError:
        raise UnknownOpError(f"no elementwise op {op_id!r}") from None
    return fn(*inputs)
