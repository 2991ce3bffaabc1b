"""Jet algebra, reverse-mode correctness and the gradient check harness."""

import numpy as np
import pytest
import sympy

from equinn import autodiff as ad
from equinn.autodiff import Jet2, Var, grad_check, jet_lift, loss_gradient


def fd_gradient(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


# -- jets -----------------------------------------------------------------


def test_jet_lift_seed():
    j = jet_lift(0.7)
    assert j.value == 0.7 and j.d1 == 1.0 and j.d2 == 0.0


def test_jet_tanh_at_zero():
    j = jet_lift(0.0).tanh()
    assert (j.value, j.d1, j.d2) == (0.0, 1.0, 0.0)


def test_jet_input_map_at_half():
    rho = jet_lift(0.5)
    f = 2.0 * rho * rho - 1.0
    assert np.isclose(f.value, -0.5)
    assert np.isclose(f.d1, 2.0)
    assert np.isclose(f.d2, 4.0)


def test_jet_cube_at_two():
    j = jet_lift(2.0) ** 3
    assert (j.value, j.d1, j.d2) == (8.0, 12.0, 12.0)


@pytest.mark.parametrize("x0", [0.3, 0.75, 1.7])
def test_jet_composites_match_symbolic(x0):
    x = sympy.Symbol("x")
    exprs = [
        sympy.tanh(2 * x**2 - 1) * (1 - x**2) + x**3,
        (x**2 + 1) / (sympy.tanh(x) + 2),
        sympy.sqrt(x**2 + 0.5) * sympy.tanh(x) - 3 / x,
    ]
    for expr in exprs:
        j = jet_lift(x0)
        f = 2.0 * j * j - 1.0  # exercise mixed scalar arithmetic
        del f
        jet = _eval_sympy_as_jet(expr, j)
        for order, got in enumerate((jet.value, jet.d1, jet.d2)):
            want = float(sympy.diff(expr, x, order).subs(x, x0))
            assert np.isclose(float(got), want, rtol=1e-12, atol=1e-12)


def _eval_sympy_as_jet(expr, j):
    x = sympy.Symbol("x")
    if expr == x:
        return j
    if expr.is_Number:
        return Jet2.constant(float(expr))
    if expr.is_Add:
        out = _eval_sympy_as_jet(expr.args[0], j)
        for a in expr.args[1:]:
            out = out + _eval_sympy_as_jet(a, j)
        return out
    if expr.is_Mul:
        out = _eval_sympy_as_jet(expr.args[0], j)
        for a in expr.args[1:]:
            out = out * _eval_sympy_as_jet(a, j)
        return out
    if expr.is_Pow:
        base, p = expr.args
        b = _eval_sympy_as_jet(base, j)
        if p == sympy.Rational(1, 2):
            return b.sqrt()
        if p.is_Integer and p > 0:
            return b ** int(p)
        if p.is_Integer and p < 0:
            return Jet2.constant(1.0) / b ** int(-p)
    if isinstance(expr, sympy.tanh):
        return _eval_sympy_as_jet(expr.args[0], j).tanh()
    raise NotImplementedError(expr)


def test_jet_product_rule_second_order():
    rng = np.random.default_rng(3)
    a_val, b_val = rng.normal(size=(2, 4))
    a = Jet2(a_val, rng.normal(size=4), rng.normal(size=4))
    b = Jet2(b_val, rng.normal(size=4), rng.normal(size=4))
    prod = a * b
    assert np.allclose(prod.d2, a.d2 * b.value + 2 * a.d1 * b.d1 + a.value * b.d2)


def test_jet_division_by_zero_value_raises():
    with np.errstate(divide="raise", invalid="raise"):
        with pytest.raises(FloatingPointError):
            jet_lift(1.0) / Jet2(np.float64(0.0), np.float64(1.0), np.float64(0.0))


# -- reverse mode: per-op gradients against finite differences -------------


OPS = {
    "add_broadcast": lambda a, b: a + b[0:1, :],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * b[:, 0:1],
    "div": lambda a, b: a / (b + 3.0),
    "rdiv": lambda a, b: 2.0 / (a + 3.0) + b,
    "pow": lambda a, b: (a + 2.0) ** 3 + b,
    "neg_abs": lambda a, b: abs(-a) + b,
    "tanh": lambda a, b: ad.tanh(a * b),
    "sqrt": lambda a, b: ad.sqrt(a * a + b * b + 0.1),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "slice_reshape": lambda a, b: ad.reshape(a[1:3], (8,)) * 2.0 + ad.sum_all(b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_fd(name):
    op = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(3, 4))

    def loss_of(vec):
        a = vec[: a0.size]
        b = vec[a0.size :]
        av = ad.reshape(a, a0.shape)
        bv = ad.reshape(b, b0.shape)
        return ad.mean_all(op(av, bv) * 1.0)

    x0 = np.concatenate([a0.ravel(), b0.ravel()])
    val, grad = loss_gradient(loss_of, x0)
    fd = fd_gradient(lambda v: float(ad.value_of(loss_of(Var(v)))), x0)
    assert np.allclose(grad, fd, rtol=1e-6, atol=1e-9), name


def test_loss_gradient_quadratic_example():
    val, grad = loss_gradient(lambda p: ad.sum_all(p * p), np.array([1.0, 2.0]))
    assert val == 5.0
    assert np.array_equal(grad, np.array([2.0, 4.0]))


def test_loss_gradient_unused_parameter_entry_is_zero():
    def loss(p):
        return ad.sum_all(p[:2] * p[:2])

    _, grad = loss_gradient(loss, np.array([1.0, 2.0, 7.0]))
    assert grad[2] == 0.0


def test_loss_gradient_rejects_nonfinite():
    with np.errstate(divide="ignore"):
        with pytest.raises(ad.NonFiniteLossError):
            loss_gradient(lambda p: ad.sum_all(p / 0.0), np.array([1.0]))


def test_gradient_is_deterministic():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(6, 6))

    def loss(p):
        m = ad.reshape(p, (6, 6))
        return ad.mean_all(ad.tanh(ad.matmul(m, w)) ** 2)

    x = rng.normal(size=36)
    g1 = loss_gradient(loss, x)[1]
    g2 = loss_gradient(loss, x)[1]
    assert np.array_equal(g1, g2)


def test_mean_is_permutation_invariant():
    rng = np.random.default_rng(5)
    x = rng.normal(size=977) * 10.0 ** rng.integers(-6, 6, size=977)
    perm = rng.permutation(977)
    assert ad.mean_all(x) == ad.mean_all(x[perm])


def test_matmul_avoids_blas_and_matches_dot():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.allclose(ad.matmul(a, b), a @ b, rtol=1e-13)


# -- grad_check ------------------------------------------------------------


def test_grad_check_quadratic_is_tiny():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(8, 8))
    q = q @ q.T + 8 * np.eye(8)

    def loss(p):
        return ad.sum_all(p * ad.matmul(ad.reshape(p, (1, 8)), q)[0]) * 0.5

    err = grad_check(loss, rng.normal(size=8), step=1e-4, samples=8)
    assert err <= 1e-10


def test_grad_check_constant_loss():
    err = grad_check(lambda p: ad.sum_all(p * 0.0), np.ones(4), step=1e-4, samples=4)
    assert err == 0.0


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda p: ad.sum_all(p), np.ones(3), step=0.0)
