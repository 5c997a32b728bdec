"""Reverse-mode gradient contracts: analytic values, second order,
create-graph semantics, reachability errors, and the solve adjoint."""

import numpy as np
import pytest

from metaprop.autodiff import (
    Tensor,
    UnreachableGradientError,
    AutodiffError,
    grad,
    ops,
)


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    out = ops.tensor_sum(ops.mul(x, x))
    (g,) = grad(out, [x])
    assert np.array_equal(g.data, [2.0, 4.0, 6.0])


def test_second_derivative_of_cube():
    x = Tensor(2.0, requires_grad=True)
    y = ops.power(x, 3.0)
    (g1,) = grad(y, [x], create_graph=True)
    (g2,) = grad(g1, [x])
    assert g2.item() == pytest.approx(12.0, rel=1e-12)


def test_create_graph_flag_controls_differentiability():
    x = Tensor(1.5, requires_grad=True)
    y = ops.power(x, 3.0)
    (detached,) = grad(y, [x])
    assert detached.parents == () and not detached.requires_grad
    (live,) = grad(y, [x], create_graph=True)
    assert live.requires_grad


def test_grad_requires_scalar_output():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(AutodiffError):
        grad(ops.mul(x, x), [x])


def test_unreachable_wrt_raises_not_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    out = ops.tensor_sum(ops.mul(x, x))
    with pytest.raises(UnreachableGradientError):
        grad(out, [y])
    (gz,) = grad(out, [y], allow_unreachable=True)
    assert np.array_equal(gz.data, [0.0])


def test_argmax_barrier_makes_wrt_unreachable():
    x = Tensor([[0.4, 0.6]], requires_grad=True)
    labels = ops.argmax_rows(x)
    out = ops.tensor_sum(labels)
    with pytest.raises(UnreachableGradientError):
        grad(out, [x])


def _fd(f, value: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    out = np.zeros_like(value)
    flat = value.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(value)
        flat[j] = orig - h
        fm = f(value)
        flat[j] = orig
        out.reshape(-1)[j] = (fp - fm) / (2 * h)
    return out


def test_solve_gradient_wrt_alpha_matches_central_difference():
    # d/dalpha of sum((I - alpha*S)^{-1} Y) on a fixed 3x3 S at alpha = 0.5
    rng = np.random.default_rng(23)
    s_val = rng.uniform(0.0, 0.3, size=(3, 3))
    y_val = rng.normal(size=(3, 2))

    def closed_form(alpha_arr: np.ndarray) -> float:
        a = np.eye(3) - float(alpha_arr) * s_val
        return float(np.linalg.solve(a, y_val).sum())

    alpha = Tensor(0.5, requires_grad=True)
    system = ops.sub(ops.eye(3), ops.mul(alpha, Tensor(s_val)))
    out = ops.tensor_sum(ops.linear_solve(system, Tensor(y_val)))
    (g,) = grad(out, [alpha])
    numeric = _fd(closed_form, np.array(0.5))
    assert abs(g.item() - float(numeric)) / max(1.0, abs(float(numeric))) < 1e-6


def test_solve_gradient_wrt_matrix_and_rhs():
    rng = np.random.default_rng(29)
    a_val = np.eye(4) + rng.uniform(-0.2, 0.2, size=(4, 4))
    b_val = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 3))  # random projection to a scalar

    a = Tensor(a_val.copy(), requires_grad=True)
    b = Tensor(b_val.copy(), requires_grad=True)
    out = ops.tensor_sum(ops.mul(ops.linear_solve(a, b), Tensor(w)))
    ga, gb = grad(out, [a, b])

    numeric_a = _fd(lambda v: float((np.linalg.solve(v, b_val) * w).sum()), a_val.copy())
    numeric_b = _fd(lambda v: float((np.linalg.solve(a_val, v) * w).sum()), b_val.copy())
    assert np.allclose(ga.data, numeric_a, rtol=1e-6, atol=1e-8)
    assert np.allclose(gb.data, numeric_b, rtol=1e-6, atol=1e-8)


def test_second_order_through_sgd_step_matches_fd():
    # One-step inner update w' = w - eta * dL_in/dw, then outer loss L_out(w');
    # the full gradient through the update must match finite differences.
    rng = np.random.default_rng(31)
    x_in = rng.normal(size=(6, 3))
    y_in = rng.normal(size=(6, 2))
    x_out = rng.normal(size=(4, 3))
    y_out = rng.normal(size=(4, 2))
    eta = 0.1

    def losses(w_val: np.ndarray) -> float:
        w = Tensor(w_val.copy(), requires_grad=True)
        inner = ops.mean(ops.power(ops.sub(ops.matmul(Tensor(x_in), w), Tensor(y_in)), 2.0))
        (gw,) = grad(inner, [w], create_graph=True)
        w_prime = ops.sub(w, ops.scalar_mul(eta, gw))
        outer = ops.mean(ops.power(ops.sub(ops.matmul(Tensor(x_out), w_prime), Tensor(y_out)), 2.0))
        return outer, w

    w0 = rng.normal(size=(3, 2))
    outer, w = losses(w0)
    (analytic,) = grad(outer, [w])
    numeric = _fd(lambda v: float(losses(v)[0].data), w0.copy())
    rel = np.abs(analytic.data - numeric) / np.maximum(1.0, np.abs(numeric))
    assert rel.max() < 1e-6


def test_gradient_accumulates_over_reuse():
    x = Tensor(3.0, requires_grad=True)
    out = ops.add(ops.mul(x, x), ops.scalar_mul(4.0, x))  # x^2 + 4x
    (g,) = grad(out, [x])
    assert g.item() == pytest.approx(10.0)


def test_broadcast_gradient_sums_correctly():
    bias = Tensor([1.0, -1.0], requires_grad=True)
    x = Tensor(np.ones((5, 2)))
    out = ops.tensor_sum(ops.add(x, bias))
    (g,) = grad(out, [bias])
    assert np.array_equal(g.data, [5.0, 5.0])


def test_grad_through_concat_and_take():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    cat = ops.concat([a, b])
    out = ops.tensor_sum(ops.mul(cat, Tensor([1.0, 10.0, 100.0])))
    ga, gb = grad(out, [a, b])
    assert np.array_equal(ga.data, [1.0, 10.0])
    assert np.array_equal(gb.data, [100.0])
