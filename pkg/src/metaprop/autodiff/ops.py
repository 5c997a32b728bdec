"""Differentiable primitive ops and the op-kind registry.

Each builder produces a graph node whose VJP closure is written with the
same public ops, so backward passes are themselves differentiable.  Ops
where the backward rule is a constant linear map (relu masks, max-pool
scatter, gather/scatter index maps) route gradients through frozen masks
or index arrays, which is exact for second order: those maps have zero
curvature almost everywhere.

Composite kinds (softmax-rows, mean, conv2d, batchnorm-per-channel, ...)
record their constituent primitives on the graph; the registry exposes all
spec'd kinds uniformly through apply_op.
"""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .tensor import (
    ShapeMismatchError,
    SingularMatrixError,
    Tensor,
    as_tensor,
    make_node,
)

_PIVOT_TOL = 1e-12


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


def _finish(out: Tensor, vjp) -> Tensor:
    # Attach a VJP that needs to reference the output node itself.
    if out.parents:
        out.vjp = vjp
    return out


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> tuple[Tensor, Tensor]:
    try:
        target = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None
    if a.shape != target:
        a = broadcast_to(a, target)
    if b.shape != target:
        b = broadcast_to(b, target)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        a, b = _broadcast_pair(a, b, "add")

    def vjp(g):
        return (g, g)

    return make_node(a.data + b.data, (a, b), vjp, "add", lambda x, y: x + y)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        a, b = _broadcast_pair(a, b, "mul")

    def vjp(g):
        return (mul(g, b) if a.requires_grad else None,
                mul(g, a) if b.requires_grad else None)

    return make_node(a.data * b.data, (a, b), vjp, "mul", lambda x, y: x * y)


def neg(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (neg(g),)

    return make_node(-x.data, (x,), vjp, "neg", lambda v: -v)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        a, b = _broadcast_pair(a, b, "div")
    out = make_node(a.data / b.data, (a, b), None, "div", lambda x, y: x / y)

    def vjp(g):
        ga = div(g, b) if a.requires_grad else None
        gb = neg(div(mul(g, out), b)) if b.requires_grad else None
        return (ga, gb)

    return _finish(out, vjp)


def scalar_mul(c: float, x) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def vjp(g):
        return (scalar_mul(c, g),)

    return make_node(c * x.data, (x,), vjp, "scalar-mul", lambda v: c * v)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    p = float(p)

    def vjp(g):
        return (scalar_mul(p, mul(g, power(x, p - 1.0))),)

    return make_node(x.data ** p, (x,), vjp, "power", lambda v: v ** p)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("maximum", a.shape, b.shape)
    mask = a.data >= b.data

    def vjp(g):
        return (mul(g, constant(mask.astype(np.float64))),
                mul(g, constant((~mask).astype(np.float64))))

    return make_node(np.maximum(a.data, b.data), (a, b), vjp, "maximum",
                     lambda x, y: np.maximum(x, y))


# ---------------------------------------------------------------------------
# shape manipulation


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    target = tuple(int(s) for s in shape)
    try:
        data = np.ascontiguousarray(np.broadcast_to(x.data, target))
    except ValueError:
        raise ShapeMismatchError("broadcast", x.shape, target) from None

    def vjp(g):
        return (_sum_to(g, x.shape),)

    return make_node(data, (x,), vjp, "broadcast",
                     lambda v: np.ascontiguousarray(np.broadcast_to(v, target)))


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to the source shape."""
    if g.shape == shape:
        return g
    extra = len(g.shape) - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    out = tensor_sum(g, axis=axes) if axes else g
    return reshape(out, shape)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    target = (int(shape),) if isinstance(shape, int) else tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(target)
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, tuple(target)) from None
    src_shape = x.shape

    def vjp(g):
        return (reshape(g, src_shape),)

    return make_node(data, (x,), vjp, "reshape", lambda v: v.reshape(target))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        if x.data.ndim != 2:
            raise ShapeMismatchError("transpose", x.shape)
        perm = (1, 0)
    else:
        perm = tuple(axes)
    inv = tuple(np.argsort(perm))

    def vjp(g):
        return (transpose(g, inv),)

    return make_node(np.ascontiguousarray(np.transpose(x.data, perm)), (x,), vjp,
                     "transpose", lambda v: np.ascontiguousarray(np.transpose(v, perm)))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeMismatchError("concat")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *[p.shape for p in parts]) from None

    base = np.arange(data.size, dtype=np.int64).reshape(data.shape)
    slicer: list = [slice(None)] * data.ndim
    piece_idx = []
    offset = 0
    for p in parts:
        width = p.shape[axis] if p.data.ndim else 1
        slicer[axis] = slice(offset, offset + width)
        piece_idx.append(np.ascontiguousarray(base[tuple(slicer)]))
        offset += width

    def vjp(g):
        return tuple(take(g, idx) if p.requires_grad else None
                     for p, idx in zip(parts, piece_idx))

    return make_node(data, tuple(parts), vjp, "concat",
                     lambda *vs: np.concatenate(list(vs), axis=axis))


# ---------------------------------------------------------------------------
# gather / scatter (frozen index maps; linear, hence exact for second order)


def take(x, idx: np.ndarray) -> Tensor:
    """Gather by flat index; entries of -1 read as 0 (used for padding)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    flat = x.data.reshape(-1)
    if idx.size and (idx.max() >= flat.size or idx.min() < -1):
        raise ShapeMismatchError("take", x.shape, idx.shape)
    has_pad = bool((idx < 0).any())
    data = flat[np.clip(idx, 0, None)]
    if has_pad:
        data = np.where(idx >= 0, data, 0.0)
    src_shape = x.shape

    def vjp(g):
        return (scatter_add(g, idx, src_shape),)

    def replay(v):
        d = v.reshape(-1)[np.clip(idx, 0, None)]
        return np.where(idx >= 0, d, 0.0) if has_pad else d

    return make_node(data, (x,), vjp, "take", replay)


def scatter_add(x, idx: np.ndarray, out_shape) -> Tensor:
    """Adjoint of take: accumulate x's elements at flat positions idx."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape:
        raise ShapeMismatchError("scatter-add", x.shape, idx.shape)
    out_shape = tuple(int(s) for s in out_shape)
    valid = idx >= 0
    flat_idx = idx[valid]
    total = int(np.prod(out_shape)) if out_shape else 1

    def forward(v: np.ndarray) -> np.ndarray:
        buf = np.zeros(total)
        np.add.at(buf, flat_idx, v[valid])
        return buf.reshape(out_shape)

    def vjp(g):
        return (take(g, idx),)

    return make_node(forward(x.data), (x,), vjp, "scatter-add", forward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return (ga, gb)

    return make_node(a.data @ b.data, (a, b), vjp, "matmul", lambda x, y: x @ y)


def linear_solve(a, b) -> Tensor:
    """Solve A X = B by dense LU with partial pivoting.

    Gradient uses the adjoint identities (X = A^-1 B):
        grad_B = A^-T grad_X,   grad_A = -grad_B X^T
    which avoids differentiating an explicit inverse.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("linear-solve", a.shape, b.shape)
    if b.data.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeMismatchError("linear-solve", a.shape, b.shape)

    def forward(av: np.ndarray, bv: np.ndarray) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # singularity is reported via our own error
            lu, piv = lu_factor(av, check_finite=False)
        smallest = float(np.min(np.abs(np.diag(lu))))
        if smallest < _PIVOT_TOL:
            raise SingularMatrixError(
                f"linear-solve: pivot magnitude {smallest:.3e} below {_PIVOT_TOL:.0e}"
            )
        return lu_solve((lu, piv), bv, check_finite=False)

    out = make_node(forward(a.data, b.data), (a, b), None, "linear-solve", forward)

    def vjp(g):
        gb = linear_solve(transpose(a), g)
        ga = neg(matmul(gb, transpose(out))) if a.requires_grad else None
        return (ga, gb if b.requires_grad else None)

    return _finish(out, vjp)


def squared_distance_matrix(x) -> Tensor:
    """Pairwise squared euclidean distances between the rows of x."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError("squared-euclidean-distance-matrix", x.shape)
    r = tensor_sum(mul(x, x), axis=1, keepdims=True)  # (n, 1)
    return sub(add(r, transpose(r)), scalar_mul(2.0, matmul(x, transpose(x))))


# ---------------------------------------------------------------------------
# nonlinearities


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = make_node(np.exp(x.data), (x,), None, "exp", np.exp)

    def vjp(g):
        return (mul(g, out),)

    return _finish(out, vjp)


def log(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (div(g, x),)

    return make_node(np.log(x.data), (x,), vjp, "log", np.log)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, constant(mask)),)

    return make_node(np.maximum(x.data, 0.0), (x,), vjp, "relu",
                     lambda v: np.maximum(v, 0.0))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.data
    data = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                    np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = make_node(data, (x,), None, "sigmoid",
                    lambda u: np.where(u >= 0, 1.0 / (1.0 + np.exp(-np.abs(u))),
                                       np.exp(-np.abs(u)) / (1.0 + np.exp(-np.abs(u)))))

    def vjp(g):
        return (mul(g, sub(out, mul(out, out))),)

    return _finish(out, vjp)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    ndim = x.data.ndim
    if axis is None:
        axes = tuple(range(ndim))
    elif isinstance(axis, int):
        axes = (axis % ndim,)
    else:
        axes = tuple(a % ndim for a in axis)
    data = x.data.sum(axis=axes or None, keepdims=keepdims)
    kd_shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
    src_shape = x.shape

    def vjp(g):
        return (broadcast_to(reshape(g, kd_shape), src_shape),)

    return make_node(data, (x,), vjp, "sum",
                     lambda v: v.sum(axis=axes or None, keepdims=keepdims))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    s = tensor_sum(x, axis=axis, keepdims=keepdims)
    count = x.size / s.size if s.size else x.size
    return scalar_mul(1.0 / count, s)


# ---------------------------------------------------------------------------
# row-structured ops for classification


def softmax_rows(x) -> Tensor:
    """Rowwise softmax of a 2-D tensor (max-shifted for stability)."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError("softmax-rows", x.shape)
    shift = constant(x.data.max(axis=1, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, tensor_sum(e, axis=1, keepdims=True))


def argmax_rows(x) -> Tensor:
    """Rowwise argmax indices; a gradient barrier (ties pick the lowest column)."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError("argmax-rows", x.shape)
    out = make_node(np.argmax(x.data, axis=1).astype(np.float64), (), None,
                    "argmax-rows", None)
    out.tainted = x.tainted
    return out


def cross_entropy_with_targets(logits, targets) -> Tensor:
    """Mean cross-entropy of rowwise-softmaxed logits against integer targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatchError("cross-entropy-with-targets", logits.shape, targets.shape)
    b, n = logits.shape
    t = targets.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= n):
        raise ShapeMismatchError("cross-entropy-with-targets", logits.shape, targets.shape)
    shift = constant(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = log(tensor_sum(exp(z), axis=1))           # (b,)
    picked = take(z, np.arange(b, dtype=np.int64) * n + t)
    return mean(sub(lse, picked))


# ---------------------------------------------------------------------------
# convolutional ops

_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(shape: tuple[int, ...], kh: int, kw: int, pad: int) -> np.ndarray:
    """Flat gather map turning (B,C,H,W) into patch rows; -1 marks padding."""
    key = (shape, kh, kw, pad)
    cached = _IM2COL_CACHE.get(key)
    if cached is not None:
        return cached
    bsz, c, h, w = shape
    oh, ow = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    iy = np.arange(oh)[:, None] + np.arange(kh)[None, :] - pad     # (oh, kh)
    ix = np.arange(ow)[:, None] + np.arange(kw)[None, :] - pad     # (ow, kw)
    inside = ((iy >= 0) & (iy < h))[:, None, :, None] & ((ix >= 0) & (ix < w))[None, :, None, :]
    spatial = iy[:, None, :, None] * w + ix[None, :, None, :]      # (oh, ow, kh, kw)
    chan = (np.arange(c) * h * w)[None, None, None, :, None, None]
    batch = (np.arange(bsz) * c * h * w)[:, None, None, None, None, None]
    full = spatial[None, :, :, None, :, :] + chan + batch          # (B, oh, ow, c, kh, kw)
    idx = np.where(inside[None, :, :, None, :, :], full, -1)
    idx = idx.reshape(bsz * oh * ow, c * kh * kw).astype(np.int64)
    _IM2COL_CACHE[key] = idx
    return idx


def conv2d(x, w, b, padding: int = 1) -> Tensor:
    """2-D convolution (stride 1) via patch gathering and one matmul."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("conv2d", x.shape, w.shape)
    co, ci, kh, kw = w.shape
    if b.shape != (co,):
        raise ShapeMismatchError("conv2d", w.shape, b.shape)
    bsz, _, h, wd = x.shape
    oh, ow = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    cols = take(x, _im2col_indices(x.shape, kh, kw, padding))     # (B*OH*OW, CI*KH*KW)
    out_flat = add(matmul(cols, transpose(reshape(w, (co, ci * kh * kw)))), b)
    return transpose(reshape(out_flat, (bsz, oh, ow, co)), (0, 3, 1, 2))


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2 (the only pooling the pipeline uses)."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeMismatchError("max-pool2d", x.shape)
    bsz, c, h, w = x.shape
    h2, w2 = h // 2, w // 2

    def windows(v: np.ndarray) -> np.ndarray:
        return (v.reshape(bsz, c, h2, 2, w2, 2)
                 .transpose(0, 1, 2, 4, 3, 5)
                 .reshape(bsz, c, h2, w2, 4))

    v = windows(x.data)
    am = np.argmax(v, axis=-1)                                    # ties: lowest index
    data = np.take_along_axis(v, am[..., None], axis=-1)[..., 0]

    base = ((np.arange(bsz)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * h
            + np.arange(h2)[None, None, :, None] * 2) * w + np.arange(w2)[None, None, None, :] * 2
    idx = (base + (am // 2) * w + (am % 2)).astype(np.int64)
    src_shape = x.shape

    def vjp(g):
        return (scatter_add(g, idx, src_shape),)

    def replay(vv: np.ndarray) -> np.ndarray:
        wv = windows(vv)
        return np.take_along_axis(wv, np.argmax(wv, axis=-1)[..., None], axis=-1)[..., 0]

    return make_node(data, (x,), vjp, "max-pool2d", replay)


def batchnorm_per_channel(x, eps: float = 1e-5) -> Tensor:
    """Normalize by per-batch channel statistics (no affine parameters).

    Rank 4 inputs normalize over (batch, height, width) per channel; rank 2
    inputs normalize over the batch per feature.  Per-batch statistics are
    used everywhere: the transductive setting always processes the full
    episode batch.
    """
    x = as_tensor(x)
    if x.data.ndim == 4:
        axes: tuple[int, ...] = (0, 2, 3)
    elif x.data.ndim == 2:
        axes = (0,)
    else:
        raise ShapeMismatchError("batchnorm-per-channel", x.shape)
    mu = mean(x, axis=axes, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=axes, keepdims=True)
    return mul(centered, power(add(var, constant(eps)), -0.5))


# ---------------------------------------------------------------------------
# registry

OP_KINDS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax-rows": softmax_rows,
    "mean": mean,
    "concat": concat,
    "reshape": reshape,
    "conv2d": conv2d,
    "max-pool2d": max_pool2d,
    "batchnorm-per-channel": batchnorm_per_channel,
    "squared-euclidean-distance-matrix": squared_distance_matrix,
    "linear-solve": linear_solve,
    "argmax-rows": argmax_rows,
    "cross-entropy-with-targets": cross_entropy_with_targets,
}


def apply_op(kind: str, *inputs, **meta) -> Tensor:
    """Dispatch a primitive by its registered kind name."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise KeyError(f"unknown op kind {kind!r}; known: {sorted(OP_KINDS)}") from None
    return fn(*inputs, **meta)
