"""Episode graph construction and closed-form label propagation.

The similarity kernel, k-NN sparsification, and symmetric normalization
give a matrix S with spectral radius at most 1; scores then solve
(I - alpha*S) F = Y, with alpha = sigmoid(alpha_raw) learnable and always
inside (0, 1).  Query rows of Y are zero so all label mass starts at the
support set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops


class PropagationError(Exception):
    pass


@dataclass
class AlphaParam:
    """Propagation strength: raw is unconstrained and trainable, the
    effective value sigmoid(raw) controls how much graph structure enters
    the propagated scores."""

    raw: Tensor

    @classmethod
    def from_effective(cls, value: float) -> "AlphaParam":
        if not 0.0 < value < 1.0:
            raise PropagationError(f"effective alpha must be in (0,1), got {value}")
        raw = np.log(value / (1.0 - value))
        return cls(Tensor(raw, requires_grad=True))

    def effective(self) -> Tensor:
        return ops.sigmoid(self.raw)

    def effective_value(self) -> float:
        return float(ops.sigmoid(self.raw.detach()).data)


@dataclass
class PropagationResult:
    similarity: Tensor         # W: kernel, symmetrized, zero diagonal
    sparsified: Tensor         # W after k-NN masking and re-symmetrization
    graph: Tensor              # S: degree-normalized similarity
    scores: Tensor             # F, all rows
    query_soft: Tensor         # row-softmax of F's query rows
    pseudo_labels: np.ndarray  # argmax of F's query rows; gradient barrier


def label_matrix(support_labels: np.ndarray, n_classes: int, n_total: int) -> Tensor:
    """One-hot support rows on top, all-zero query rows below."""
    support_labels = np.asarray(support_labels, dtype=np.int64)
    nk = support_labels.shape[0]
    if nk > n_total:
        raise PropagationError(f"{nk} support rows exceed {n_total} total rows")
    if nk and (support_labels.min() < 0 or support_labels.max() >= n_classes):
        raise PropagationError("support labels out of range")
    y = np.zeros((n_total, n_classes))
    y[np.arange(nk), support_labels] = 1.0
    return Tensor(y)


def similarity_matrix(logits_all: Tensor, sigma: Tensor) -> Tensor:
    """W[i,j] = exp(-0.5 * ||z_i/s_i - z_j/s_j||^2) off the diagonal.

    Scaling each example by its own length scale keeps the matrix symmetric
    up to float noise; an elementwise max with the transpose makes the
    symmetry bitwise.  The diagonal is zeroed.
    """
    n = logits_all.shape[0]
    if sigma.shape != (n,):
        raise PropagationError(f"sigma shape {sigma.shape} does not match {n} examples")
    if (sigma.data <= 0).any():
        raise PropagationError("length scales must be strictly positive")
    scaled = ops.div(logits_all, ops.reshape(sigma, (n, 1)))
    kernel = ops.exp(ops.scalar_mul(-0.5, ops.squared_distance_matrix(scaled)))
    off_diagonal = ops.ones((n, n)).data - np.eye(n)
    w = ops.mul(kernel, Tensor(off_diagonal))
    return ops.maximum(w, ops.transpose(w))


def knn_sparsify(w: Tensor, k: int) -> Tensor:
    """Keep each row's k largest entries (ties keep the lowest column),
    then re-symmetrize with an elementwise max."""
    n = w.shape[0]
    if not 1 <= k <= n - 1:
        raise PropagationError(f"k must be in [1, {n - 1}], got {k}")
    mask = np.zeros((n, n))
    for i in range(n):
        keep = np.argsort(-w.data[i], kind="stable")[:k]
        mask[i, keep] = 1.0
    sparse = ops.mul(w, Tensor(mask))
    return ops.maximum(sparse, ops.transpose(sparse))


def normalize(w: Tensor) -> Tensor:
    """Symmetric degree normalization D^-1/2 W D^-1/2; rows with zero
    degree map to zero rows instead of dividing."""
    if (w.data < 0).any():
        raise PropagationError("similarity entries must be nonnegative")
    n = w.shape[0]
    degree = ops.tensor_sum(w, axis=1)
    positive = (degree.data > 0).astype(np.float64)
    guarded = ops.add(ops.mul(degree, Tensor(positive)), Tensor(1.0 - positive))
    inv_sqrt = ops.mul(ops.power(guarded, -0.5), Tensor(positive))
    return ops.mul(ops.mul(w, ops.reshape(inv_sqrt, (n, 1))), ops.reshape(inv_sqrt, (1, n)))


def propagate(s: Tensor, y: Tensor, alpha: AlphaParam) -> Tensor:
    """Closed-form propagation: solve (I - alpha*S) F = Y."""
    n = s.shape[0]
    if s.data.ndim != 2 or s.shape[0] != s.shape[1] or y.shape[0] != n:
        raise PropagationError(f"bad system shapes S{s.shape} Y{y.shape}")
    system = ops.sub(ops.eye(n), ops.mul(alpha.effective(), s))
    return ops.linear_solve(system, y)


def harden(f: Tensor, n_support: int) -> np.ndarray:
    """Pseudo labels: argmax over each query row (ties pick the lowest
    class index).  The output never carries gradient."""
    n, c = f.shape
    if n_support > n:
        raise PropagationError(f"{n_support} support rows exceed {n} total rows")
    idx = np.arange(n_support * c, n * c, dtype=np.int64).reshape(n - n_support, c)
    query_rows = ops.take(f, idx)
    return ops.argmax_rows(query_rows).data.astype(np.int64)


def run_propagation(logits_all: Tensor, sigma: Tensor, support_labels: np.ndarray,
                    n_classes: int, alpha: AlphaParam, k: int) -> PropagationResult:
    """The whole chain: kernel, k-NN, normalization, propagation, hardening."""
    n = logits_all.shape[0]
    nk = len(support_labels)
    w = similarity_matrix(logits_all, sigma)
    w_k = knn_sparsify(w, min(k, n - 1))
    s = normalize(w_k)
    y = label_matrix(support_labels, n_classes, n)
    f = propagate(s, y, alpha)
    idx = np.arange(nk * n_classes, n * n_classes, dtype=np.int64).reshape(n - nk, n_classes)
    query_soft = ops.softmax_rows(ops.take(f, idx))
    return PropagationResult(similarity=w, sparsified=w_k, graph=s, scores=f,
                             query_soft=query_soft, pseudo_labels=harden(f, nk))
