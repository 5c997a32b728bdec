"""The parameterized networks: classification backbone, graph-construction
net that emits per-example length scales, and the task modulator that
rescales the graph net's layers.

Parameters are plain layer-indexed lists of tensors ([weight, bias] per
layer) passed explicitly through forward calls so adapted copies can flow
through the bi-level graph without touching the originals.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ShapeMismatchError, Tensor, ops

Params = list[list[Tensor]]


class NetworkError(Exception):
    pass


def _linear_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _layer_params(weights: np.ndarray, biases: np.ndarray) -> list[Tensor]:
    return [Tensor(weights, requires_grad=True), Tensor(biases, requires_grad=True)]


class MLPBackbone:
    """Fully-connected classifier: depth-1 hidden relu layers, linear head.

    ``num_layers`` counts trainable layers (hidden layers plus the head);
    features are the penultimate activations.
    """

    def __init__(self, in_dim: int, n_way: int, hidden: int = 32, depth: int = 3) -> None:
        if depth < 1:
            raise NetworkError("mlp depth must be >= 1")
        self.in_dim = in_dim
        self.n_way = n_way
        self.hidden = hidden
        self.num_layers = depth

    def init_params(self, rng: np.random.Generator) -> Params:
        dims = [self.in_dim] + [self.hidden] * (self.num_layers - 1) + [self.n_way]
        return [
            _layer_params(_linear_init(rng, dims[i], (dims[i], dims[i + 1])),
                          np.zeros(dims[i + 1]))
            for i in range(self.num_layers)
        ]

    def forward(self, x: Tensor, params: Params) -> tuple[Tensor, Tensor]:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatchError("mlp-forward", x.shape, (-1, self.in_dim))
        h = x
        for w, b in params[:-1]:
            h = ops.relu(ops.add(ops.matmul(h, w), b))
        features = h
        w, b = params[-1]
        logits = ops.add(ops.matmul(h, w), b)
        return logits, features


class Conv4Backbone:
    """Four conv blocks (3x3 conv, per-channel batchnorm, relu) with 2x2
    stride-2 max-pools between blocks, then a linear head to N logits.

    num_layers = 5 trainable layers: the four conv kernels and the head.
    Batchnorm carries no affine parameters, so each block is one layer.
    """

    num_layers = 5

    def __init__(self, image_size: int, n_way: int, in_channels: int = 3,
                 channels: int = 32) -> None:
        if image_size < 8 or image_size % 8:
            raise NetworkError("conv4 needs image_size divisible by 8 (three pools)")
        self.image_size = image_size
        self.n_way = n_way
        self.in_channels = in_channels
        self.channels = channels
        self.feature_dim = channels * (image_size // 8) ** 2

    def init_params(self, rng: np.random.Generator) -> Params:
        params: Params = []
        c_in = self.in_channels
        for _ in range(4):
            fan_in = c_in * 9
            params.append(_layer_params(
                _linear_init(rng, fan_in, (self.channels, c_in, 3, 3)),
                np.zeros(self.channels)))
            c_in = self.channels
        params.append(_layer_params(
            _linear_init(rng, self.feature_dim, (self.feature_dim, self.n_way)),
            np.zeros(self.n_way)))
        return params

    def forward(self, x: Tensor, params: Params) -> tuple[Tensor, Tensor]:
        expected = (self.in_channels, self.image_size, self.image_size)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ShapeMismatchError("conv4-forward", x.shape, (-1,) + expected)
        h = x
        for block, (w, b) in enumerate(params[:4]):
            h = ops.relu(ops.batchnorm_per_channel(ops.conv2d(h, w, b, padding=1)))
            if block < 3:  # pools sit between blocks
                h = ops.max_pool2d(h)
        features = ops.reshape(h, (h.shape[0], self.feature_dim))
        w, b = params[4]
        logits = ops.add(ops.matmul(features, w), b)
        return logits, features


class GraphConstructionNet:
    """Maps a logit vector to one raw score per example; exp of the score
    is that example's length scale, so scales are always positive."""

    def __init__(self, n_way: int, hidden: int = 16, num_layers: int = 2) -> None:
        if num_layers < 1:
            raise NetworkError("graph-construction net needs at least one layer")
        self.n_way = n_way
        self.hidden = hidden
        self.num_layers = num_layers

    def init_params(self, rng: np.random.Generator) -> Params:
        dims = [self.n_way] + [self.hidden] * (self.num_layers - 1) + [1]
        return [
            _layer_params(_linear_init(rng, dims[i], (dims[i], dims[i + 1])),
                          np.zeros(dims[i + 1]))
            for i in range(self.num_layers)
        ]

    def raw_scores(self, logits: Tensor, params: Params) -> Tensor:
        if logits.data.ndim != 2 or logits.shape[1] != self.n_way:
            raise ShapeMismatchError("graph-net-forward", logits.shape, (-1, self.n_way))
        h = logits
        for w, b in params[:-1]:
            h = ops.relu(ops.add(ops.matmul(h, w), b))
        w, b = params[-1]
        return ops.add(ops.matmul(h, w), b)


class ModulationNet:
    """Two-layer MLP from the task embedding to one scalar per graph-net
    layer; relu between the layers, sigmoid at the last stage, so every
    modulation factor lies strictly in (0, 1)."""

    def __init__(self, tau_dim: int, out_dim: int, hidden: int = 32) -> None:
        self.tau_dim = tau_dim
        self.out_dim = out_dim
        self.hidden = hidden
        self.forward_calls = 0  # instrumentation for the overhead benchmark

    def init_params(self, rng: np.random.Generator) -> Params:
        return [
            _layer_params(_linear_init(rng, self.tau_dim, (self.tau_dim, self.hidden)),
                          np.zeros(self.hidden)),
            _layer_params(_linear_init(rng, self.hidden, (self.hidden, self.out_dim)),
                          np.zeros(self.out_dim)),
        ]

    def forward(self, tau: Tensor, params: Params) -> Tensor:
        if tau.shape != (self.tau_dim,):
            raise ShapeMismatchError("modulator-forward", tau.shape, (self.tau_dim,))
        self.forward_calls += 1
        row = ops.reshape(tau, (1, self.tau_dim))
        (w1, b1), (w2, b2) = params
        h = ops.relu(ops.add(ops.matmul(row, w1), b1))
        raw = ops.add(ops.matmul(h, w2), b2)
        return ops.reshape(ops.sigmoid(raw), (self.out_dim,))


def modulate_params(phi: Params, gamma: Tensor) -> Params:
    """Scale every tensor of graph-net layer l (weights and biases alike)
    by gamma[l].  The input parameter list is left untouched; the result
    stays differentiable with respect to both phi and gamma."""
    if gamma.shape != (len(phi),):
        raise ShapeMismatchError("modulate-params", gamma.shape, (len(phi),))
    out: Params = []
    for layer_index, layer in enumerate(phi):
        factor = ops.take(gamma, np.array([layer_index], dtype=np.int64))
        out.append([ops.mul(t, factor) for t in layer])
    return out


def length_scales(logits_all: Tensor, gcn: GraphConstructionNet, phi: Params) -> Tensor:
    """Per-example positive length scale: exp of the graph net's raw score."""
    raw = gcn.raw_scores(logits_all, phi)
    return ops.reshape(ops.exp(raw), (logits_all.shape[0],))


def flatten_params(params: Params) -> list[Tensor]:
    return [t for layer in params for t in layer]


def rebuild_like(template: Params, flat: Sequence[Tensor]) -> Params:
    out: Params = []
    cursor = 0
    for layer in template:
        out.append(list(flat[cursor:cursor + len(layer)]))
        cursor += len(layer)
    return out
