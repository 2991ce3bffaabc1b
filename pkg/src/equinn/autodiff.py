"""Exact derivatives for the equilibrium solver.

Two mechanisms live here:

* :class:`Jet2` -- truncated second-order Taylor jets with respect to one
  scalar seed variable (the radial coordinate).  The radial profiles are
  scalar-input functions, so forward propagation of ``(value, d1, d2)``
  through the network and the profile composition is cheap and exact.

* :class:`Var` -- reverse-mode accumulation over the evaluation trace, used
  to obtain the gradient of the scalar loss with respect to every network
  parameter.  Jet components may themselves be :class:`Var` nodes, so the
  radial jets are differentiable primitives of the reverse pass.

All array work is plain numpy.  Contractions go through ``np.einsum`` with
``optimize=False`` (no BLAS), and the final loss reduction uses exactly
rounded summation, so results are bit-reproducible regardless of worker
thread count and of collocation-node ordering.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

__all__ = [
    "Var",
    "Jet2",
    "NonFiniteLossError",
    "jet_lift",
    "loss_gradient",
    "grad_check",
    "tanh",
    "sqrt",
    "absolute",
    "matmul",
    "transpose",
    "reshape",
    "mean_all",
    "sum_all",
    "value_of",
]


class NonFiniteLossError(RuntimeError):
    """Loss evaluated to NaN/inf, typically from overlapping flux surfaces."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape``, undoing numpy broadcasting."""
    grad = np.asarray(grad)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum with optimize=False never dispatches to BLAS, keeping the
    # summation order fixed for any thread count.
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def _exact_sum(a: np.ndarray):
    """Exactly rounded sum for float64; plain sum otherwise.

    math.fsum is correctly rounded and therefore invariant under any
    permutation of the summands.
    """
    if a.dtype == np.float64:
        return np.float64(math.fsum(a.ravel().tolist()))
    return a.sum(dtype=a.dtype)


class Var:
    """One node of the reverse-mode evaluation trace.

    Holds the forward value, the parent nodes and a vector-Jacobian-product
    closure.  Gradients are accumulated by :meth:`backward` in reverse
    topological (construction) order.
    """

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # defer mixed ndarray-Var arithmetic to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.value.shape}, leaf={self._vjp is None})"

    # -- elementwise arithmetic (broadcasting, constants allowed) ---------

    def __add__(self, other):
        if isinstance(other, Var):
            out = Var(self.value + other.value, (self, other))
            out._vjp = lambda g: (
                _unbroadcast(g, self.shape),
                _unbroadcast(g, other.shape),
            )
            return out
        c = np.asarray(other)
        out = Var(self.value + c, (self,))
        out._vjp = lambda g: (_unbroadcast(g, self.shape),)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Var(-self.value, (self,))
        out._vjp = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Var):
            av, bv = self.value, other.value
            out = Var(av * bv, (self, other))
            out._vjp = lambda g: (
                _unbroadcast(g * bv, self.shape),
                _unbroadcast(g * av, other.shape),
            )
            return out
        c = np.asarray(other)
        out = Var(self.value * c, (self,))
        out._vjp = lambda g: (_unbroadcast(g * c, self.shape),)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            av, bv = self.value, other.value
            val = av / bv
            out = Var(val, (self, other))
            out._vjp = lambda g: (
                _unbroadcast(g / bv, self.shape),
                _unbroadcast(-g * val / bv, other.shape),
            )
            return out
        c = np.asarray(other)
        out = Var(self.value / c, (self,))
        out._vjp = lambda g: (_unbroadcast(g / c, self.shape),)
        return out

    def __rtruediv__(self, other):
        c = np.asarray(other)
        val = c / self.value
        out = Var(val, (self,))
        sv = self.value
        out._vjp = lambda g: (_unbroadcast(-g * val / sv, self.shape),)
        return out

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("Var ** expects a scalar exponent")
        sv = self.value
        out = Var(sv**p, (self,))
        out._vjp = lambda g: (g * (p * sv ** (p - 1)),)
        return out

    def __abs__(self):
        sv = self.value
        out = Var(np.abs(sv), (self,))
        out._vjp = lambda g: (g * np.sign(sv),)
        return out

    # -- structural ops ----------------------------------------------------

    def __getitem__(self, idx):
        out = Var(self.value[idx], (self,))
        shape, dtype = self.shape, self.value.dtype

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        out._vjp = vjp
        return out

    @property
    def T(self):
        out = Var(self.value.T, (self,))
        out._vjp = lambda g: (np.asarray(g).T,)
        return out

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = Var(self.value.reshape(shape), (self,))
        out._vjp = lambda g: (np.asarray(g).reshape(old),)
        return out

    # -- reverse pass --------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this (scalar) node into the trace."""
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(node.grad)):
                if parent.grad is None:
                    parent.grad = np.zeros(parent.shape, dtype=parent.value.dtype)
                parent.grad = parent.grad + pg


def _toposort(root: Var) -> list:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- generic ops: work on Var, Jet2 and plain ndarrays ----------------------


def value_of(x):
    """Plain numpy value of ``x`` whether it is a Var or an array."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def tanh(x):
    if isinstance(x, Var):
        y = np.tanh(x.value)
        out = Var(y, (x,))
        out._vjp = lambda g: (g * (1.0 - y * y),)
        return out
    if isinstance(x, Jet2):
        return x.tanh()
    return np.tanh(x)


def sqrt(x):
    if isinstance(x, Var):
        y = np.sqrt(x.value)
        out = Var(y, (x,))
        out._vjp = lambda g: (g * (0.5 / y),)
        return out
    if isinstance(x, Jet2):
        return x.sqrt()
    return np.sqrt(x)


def absolute(x):
    if isinstance(x, Var):
        return abs(x)
    return np.abs(x)


def matmul(a, b):
    """2D matrix product, BLAS-free, differentiable in both operands."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _matmul(np.asarray(a), np.asarray(b))
    av, bv = value_of(a), value_of(b)
    parents = tuple(x for x in (a, b) if isinstance(x, Var))
    out = Var(_matmul(av, bv), parents)

    def vjp(g):
        grads = []
        if isinstance(a, Var):
            grads.append(_matmul(g, bv.T))
        if isinstance(b, Var):
            grads.append(_matmul(av.T, g))
        return tuple(grads)

    out._vjp = vjp
    return out


def transpose(x):
    return x.T if isinstance(x, Var) else np.asarray(x).T


def reshape(x, shape):
    if isinstance(x, Var):
        return x.reshape(shape)
    return np.asarray(x).reshape(shape)


def sum_all(x):
    if isinstance(x, Var):
        val = _exact_sum(x.value)
        out = Var(val, (x,))
        shape, dtype = x.shape, x.value.dtype
        out._vjp = lambda g: (np.full(shape, g, dtype=dtype),)
        return out
    return _exact_sum(np.asarray(x))


def mean_all(x):
    n = value_of(x).size
    return sum_all(x) / n


# -- second-order forward jets ----------------------------------------------


class Jet2:
    """Value and first/second derivative with respect to one seed scalar.

    Components may be floats, numpy arrays or :class:`Var` nodes; arithmetic
    follows the truncated Taylor algebra, e.g.
    ``(a*b).d2 = a.d2*b.value + 2*a.d1*b.d1 + a.value*b.d2``.
    """

    __slots__ = ("value", "d1", "d2")

    __array_ufunc__ = None

    def __init__(self, value, d1, d2):
        self.value = value
        self.d1 = d1
        self.d2 = d2

    def __repr__(self):
        return f"Jet2({self.value!r}, {self.d1!r}, {self.d2!r})"

    @staticmethod
    def constant(value):
        z = value_of(value) * 0.0
        return Jet2(value, z, z)

    def __add__(self, other):
        if isinstance(other, Jet2):
            return Jet2(self.value + other.value, self.d1 + other.d1, self.d2 + other.d2)
        return Jet2(self.value + other, self.d1, self.d2)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.value, -self.d1, -self.d2)

    def __sub__(self, other):
        if isinstance(other, Jet2):
            return Jet2(self.value - other.value, self.d1 - other.d1, self.d2 - other.d2)
        return Jet2(self.value - other, self.d1, self.d2)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet2):
            return Jet2(
                self.value * other.value,
                self.d1 * other.value + self.value * other.d1,
                self.d2 * other.value + 2.0 * (self.d1 * other.d1) + self.value * other.d2,
            )
        return Jet2(self.value * other, self.d1 * other, self.d2 * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet2):
            return self * (1.0 / other)
        q = self.value / other.value
        q1 = (self.d1 - q * other.d1) / other.value
        q2 = (self.d2 - 2.0 * (q1 * other.d1) - q * other.d2) / other.value
        return Jet2(q, q1, q2)

    def __rtruediv__(self, other):
        return Jet2.constant(other) / self

    def __pow__(self, p: int):
        if p == 0:
            one = value_of(self.value) * 0.0 + 1.0
            return Jet2(one, one * 0.0, one * 0.0)
        if p == 1:
            return self
        v, d1, d2 = self.value, self.d1, self.d2
        vp1 = v ** (p - 1)
        return Jet2(
            v**p,
            p * vp1 * d1,
            p * (p - 1) * v ** (p - 2) * (d1 * d1) + p * vp1 * d2,
        )

    def tanh(self):
        t = tanh(self.value)
        sech2 = 1.0 - t * t
        return Jet2(
            t,
            sech2 * self.d1,
            sech2 * self.d2 - 2.0 * (t * sech2) * (self.d1 * self.d1),
        )

    def sqrt(self):
        r = sqrt(self.value)
        d1 = 0.5 * self.d1 / r
        d2 = 0.5 * self.d2 / r - (d1 * d1) / r
        return Jet2(r, d1, d2)


def jet_lift(rho):
    """Seed jet for the radial coordinate: value rho, slope 1, curvature 0."""
    rho = np.asarray(rho, dtype=float) if not isinstance(rho, Var) else rho
    one = value_of(rho) * 0.0 + 1.0
    return Jet2(rho, one, one * 0.0)


# -- gradient of a scalar loss over a flat parameter vector ------------------


def loss_gradient(loss: Callable, params: np.ndarray):
    """Evaluate ``loss`` at ``params`` and return ``(value, gradient)``.

    ``loss`` must accept a 1D Var and combine it through Var/Jet2 arithmetic
    into a scalar Var.  The gradient comes from one reverse sweep over the
    evaluation trace and is deterministic: identical params give bit-identical
    gradients.
    """
    leaf = Var(np.asarray(params, dtype=float))
    out = loss(leaf)
    if not isinstance(out, Var):
        raise TypeError("loss must return a Var scalar")
    val = float(out.value)
    if not np.isfinite(val):
        raise NonFiniteLossError(f"loss evaluated to {val}")
    out.backward()
    grad = leaf.grad
    if grad is None:
        grad = np.zeros_like(leaf.value)
    return val, np.asarray(grad, dtype=float)


def grad_check(
    loss: Callable,
    params: np.ndarray,
    step: float = 1e-4,
    samples: int = 50,
    seed: int = 0,
    fd_loss: Callable | None = None,
    richardson: bool = True,
) -> float:
    """Worst relative error of analytic vs central-difference gradients.

    A random subset of parameter entries is probed.  The finite-difference
    side may be supplied separately (``fd_loss``), e.g. an extended-precision
    evaluation of the same loss; float64 rounding in the loss value floors
    central differences near 1e-13 absolute, too coarse to certify small
    gradient entries.  With ``richardson`` the step-halving extrapolation
    ``(4 D(h/2) - D(h)) / 3`` removes the leading truncation term.

    Relative errors use ``max(|analytic|, |fd|, 1e-8)`` denominators.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=float)
    _, analytic = loss_gradient(loss, params)

    if fd_loss is None:
        def fd_loss(v, _loss=loss):
            out = _loss(Var(np.asarray(v, dtype=float)))
            return float(out.value) if isinstance(out, Var) else float(out)

        work = params.copy()
    else:
        # caller-supplied evaluator, typically extended precision
        work = params.astype(np.longdouble)

    rng = np.random.default_rng(seed)
    n = params.size
    k = min(samples, n)
    idx = rng.choice(n, size=k, replace=False)

    def central(i: int, h: float):
        xp = work.copy()
        xm = work.copy()
        xp[i] += h
        xm[i] -= h
        return (fd_loss(xp) - fd_loss(xm)) / (2.0 * h)

    worst = 0.0
    for i in idx:
        d_h = central(int(i), step)
        if richardson:
            d_h2 = central(int(i), step / 2.0)
            fd = (4.0 * d_h2 - d_h) / 3.0
        else:
            fd = d_h
        a = float(analytic[i])
        err = abs(a - float(fd)) / max(abs(a), abs(float(fd)), 1e-8)
        worst = max(worst, err)
    return worst
