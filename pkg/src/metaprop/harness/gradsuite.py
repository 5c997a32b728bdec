"""The module-by-module gradient verification suite behind the gradcheck
subcommand: every differentiable primitive, the modulator, the modulated
graph-construction path, propagation (including the strength parameter),
and a full one-step second-order outer gradient on a small MLP.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..autodiff import Tensor, grad, ops
from ..autodiff.gradcheck import GradcheckReport, gradcheck
from ..embedding import build_task_embedding
from ..nets import (
    GraphConstructionNet,
    MLPBackbone,
    ModulationNet,
    flatten_params,
    length_scales,
    modulate_params,
    rebuild_like,
)
from ..propagation import AlphaParam, label_matrix, propagate, similarity_matrix


def _param(rng, shape):
    return Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def _primitive_checks(rng) -> Iterator[tuple[str, GradcheckReport]]:
    w34 = Tensor(rng.normal(size=(3, 4)))
    w55 = Tensor(rng.normal(size=(5, 5)))
    w32 = Tensor(rng.normal(size=(3, 2)))
    wconv = Tensor(rng.normal(size=(2, 3, 4, 4)))
    wpool = Tensor(rng.normal(size=(2, 2, 2, 2)))
    wbn = Tensor(rng.normal(size=(3, 2, 4, 4)))
    cases = {
        "primitive/matmul": (lambda a, b: ops.tensor_sum(ops.matmul(a, b)),
                             [_param(rng, (3, 4)), _param(rng, (4, 2))]),
        "primitive/add": (lambda a, b: ops.tensor_sum(ops.add(a, b)),
                          [_param(rng, (3, 4)), _param(rng, (4,))]),
        "primitive/mul": (lambda a, b: ops.tensor_sum(ops.mul(a, b)),
                          [_param(rng, (3, 4)), _param(rng, (3, 4))]),
        "primitive/scalar-mul": (lambda a: ops.tensor_sum(ops.scalar_mul(-1.3, a)),
                                 [_param(rng, (5,))]),
        "primitive/exp": (lambda a: ops.tensor_sum(ops.exp(a)), [_param(rng, (3, 4))]),
        "primitive/log": (lambda a: ops.tensor_sum(ops.log(a)),
                          [Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)]),
        "primitive/relu": (lambda a: ops.tensor_sum(ops.relu(a)),
                           [Tensor(rng.uniform(0.2, 2.0, size=(3, 4))
                                   * rng.choice([-1.0, 1.0], size=(3, 4)),
                                   requires_grad=True)]),
        "primitive/sigmoid": (lambda a: ops.tensor_sum(ops.sigmoid(a)),
                              [_param(rng, (3, 4))]),
        "primitive/softmax-rows": (
            lambda a: ops.tensor_sum(ops.mul(ops.softmax_rows(a), Tensor(rng.normal(size=(3, 4))))),
            [_param(rng, (3, 4))]),
        "primitive/mean": (lambda a: ops.mean(ops.mul(a, a)), [_param(rng, (3, 4))]),
        "primitive/concat": (
            lambda a, b: ops.tensor_sum(ops.mul(ops.concat([a, b]), w55)),
            [_param(rng, (3, 5)), _param(rng, (2, 5))]),
        "primitive/reshape": (
            lambda a: ops.tensor_sum(ops.mul(ops.reshape(a, (12,)),
                                             Tensor(np.arange(12.0)))),
            [_param(rng, (3, 4))]),
        "primitive/conv2d": (
            lambda x, w, b: ops.tensor_sum(ops.mul(ops.conv2d(x, w, b), wconv)),
            [_param(rng, (2, 2, 4, 4)), _param(rng, (3, 2, 3, 3)), _param(rng, (3,))]),
        "primitive/max-pool2d": (
            lambda x: ops.tensor_sum(ops.mul(ops.max_pool2d(x), wpool)),
            [_param(rng, (2, 2, 4, 4))]),
        "primitive/batchnorm-per-channel": (
            lambda x: ops.tensor_sum(ops.mul(ops.batchnorm_per_channel(x), wbn)),
            [_param(rng, (3, 2, 4, 4))]),
        "primitive/squared-euclidean-distance-matrix": (
            lambda a: ops.tensor_sum(ops.mul(ops.squared_distance_matrix(a), w55)),
            [_param(rng, (5, 3))]),
        "primitive/linear-solve": (
            lambda a, b: ops.tensor_sum(ops.mul(
                ops.linear_solve(ops.add(ops.scalar_mul(4.0, ops.eye(3)), a), b), w32)),
            [_param(rng, (3, 3)), _param(rng, (3, 2))]),
        "primitive/cross-entropy-with-targets": (
            lambda a: ops.cross_entropy_with_targets(a, np.array([0, 2, 1])),
            [_param(rng, (3, 3))]),
    }
    for name, (fn, inputs) in cases.items():
        yield name, gradcheck(fn, inputs, h=1e-5, tol=1e-5)


def _modulator_check(rng) -> GradcheckReport:
    mod = ModulationNet(tau_dim=6, out_dim=2, hidden=8)
    psi = mod.init_params(rng)
    tau = Tensor(rng.normal(size=6), requires_grad=True)
    weights = Tensor(rng.normal(size=2))

    def f(w1, b1, w2, b2, tau_in):
        gamma = mod.forward(tau_in, [[w1, b1], [w2, b2]])
        return ops.tensor_sum(ops.mul(gamma, weights))

    return gradcheck(f, flatten_params(psi) + [tau], h=1e-5, tol=1e-5)


def _modulated_graph_path_check(rng) -> GradcheckReport:
    gcn = GraphConstructionNet(n_way=3, hidden=6, num_layers=2)
    mod = ModulationNet(tau_dim=5, out_dim=2, hidden=8)
    phi, psi = gcn.init_params(rng), mod.init_params(rng)
    tau = Tensor(rng.normal(size=5))
    logits = Tensor(rng.normal(size=(6, 3)))
    weights = Tensor(rng.normal(size=6))
    template = phi

    def f(*tensors):
        phi_in = rebuild_like(template, list(tensors[:4]))
        psi_in = rebuild_like(template, list(tensors[4:]))
        gamma = mod.forward(tau, psi_in)
        sigma = length_scales(logits, gcn, modulate_params(phi_in, gamma))
        return ops.tensor_sum(ops.mul(sigma, weights))

    return gradcheck(f, flatten_params(phi) + flatten_params(psi), h=1e-5, tol=1e-5)


def _propagation_check(rng) -> GradcheckReport:
    n, nk, classes = 8, 4, 3
    base_logits = rng.normal(size=(n, classes))
    y = label_matrix(rng.integers(0, classes, size=nk), classes, n)
    weights = Tensor(rng.normal(size=(n, classes)))

    def f(logits, log_sigma, alpha_raw):
        sigma = ops.exp(log_sigma)
        w = similarity_matrix(logits, sigma)
        from ..propagation import knn_sparsify, normalize

        s = normalize(knn_sparsify(w, 4))
        f_scores = propagate(s, y, AlphaParam(alpha_raw))
        return ops.tensor_sum(ops.mul(f_scores, weights))

    inputs = [Tensor(base_logits, requires_grad=True),
              Tensor(rng.uniform(-0.3, 0.3, size=n), requires_grad=True),
              Tensor(0.8, requires_grad=True)]
    return gradcheck(f, inputs, h=1e-5, tol=1e-5)


def _second_order_outer_check(rng) -> GradcheckReport:
    # <= 200 parameters: 4 -> 8 -> 3 MLP has 4*8+8 + 8*3+3 = 67
    backbone = MLPBackbone(in_dim=4, n_way=3, hidden=8, depth=2)
    theta = backbone.init_params(rng)
    x_in = Tensor(rng.normal(size=(6, 4)))
    y_in = np.array([0, 1, 2, 0, 1, 2])
    x_out = Tensor(rng.normal(size=(6, 4)))
    y_out = np.array([2, 1, 0, 2, 1, 0])
    eta = 0.1
    template = theta

    def f(*tensors):
        current = rebuild_like(template, list(tensors))
        logits, _ = backbone.forward(x_in, current)
        inner = ops.cross_entropy_with_targets(logits, y_in)
        flat = [t for layer in current for t in layer]
        grads = grad(inner, flat, create_graph=True)
        stepped = [ops.sub(p, ops.scalar_mul(eta, g)) for p, g in zip(flat, grads)]
        adapted = rebuild_like(template, stepped)
        out_logits, _ = backbone.forward(x_out, adapted)
        return ops.cross_entropy_with_targets(out_logits, y_out)

    return gradcheck(f, flatten_params(theta), h=1e-5, tol=1e-4)


def run_gradient_suite() -> Iterator[tuple[str, GradcheckReport]]:
    """Yields (check name, report) pairs; used by the CLI and acceptance."""
    rng = np.random.default_rng(20240817)
    yield from _primitive_checks(rng)
    yield "nets/modulator", _modulator_check(rng)
    yield "nets/modulated-graph-path", _modulated_graph_path_check(rng)
    yield "propagation/full-chain-with-alpha", _propagation_check(rng)
    yield "metaloop/second-order-outer-step", _second_order_outer_check(rng)
