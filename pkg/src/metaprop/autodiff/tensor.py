"""Reverse-mode autodiff core: the Tensor node type and graph plumbing.

Every value in the pipeline is a float64 numpy array wrapped in a Tensor.
Tensors form a DAG; each non-leaf node keeps references to its parent
tensors plus a VJP closure.  VJP closures are written in terms of the same
differentiable ops, so the backward pass can itself be recorded and
differentiated again (second-order gradients for bi-level optimization).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

_node_counter = itertools.count()
_grad_enabled: bool = True
_active_tape: Optional["Graph"] = None


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatchError(AutodiffError):
    """An op received operands whose shapes do not conform to its rule."""

    def __init__(self, op: str, *shapes: tuple) -> None:
        self.op = op
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class SingularMatrixError(AutodiffError):
    """linear-solve hit a pivot below the singularity threshold."""


class UnreachableGradientError(AutodiffError):
    """A wrt tensor is not an ancestor of the differentiated output."""


class Tensor:
    """A float64 array participating in a differentiable computation graph.

    Leaves are created directly; interior nodes are created by ops, which
    attach ``parents`` and a ``vjp`` closure mapping the output adjoint to
    per-parent adjoint contributions.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "node_id", "tainted")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Optional[Callable] = None
        self.op: str = "leaf"
        self.node_id: int = next(_node_counter)
        self.tainted: bool = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A leaf copy sharing this tensor's values; taint survives."""
        out = Tensor(self.data)
        out.tainted = self.tainted
        return out

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{grad})"

    # Operator sugar; the actual builders live in ops.py (imported lazily to
    # avoid a module cycle).
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __pow__(self, p):
        from . import ops

        return ops.power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        from . import ops

        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops

        return ops.transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording; ops inside produce detached results."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_node(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Optional[Callable],
    op: str,
    replay_fn: Optional[Callable] = None,
) -> Tensor:
    """Create an interior node; the single entry point used by all ops.

    Taint propagates unconditionally (the transductive-hygiene audit must
    hold even inside no_grad regions); parents and the VJP are recorded
    only when gradients are both enabled and needed.
    """
    out = Tensor(data)
    out.op = op
    for t in inputs:
        if t.tainted:
            out.tainted = True
            break
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.parents = tuple(inputs)
        out.vjp = vjp
    if _active_tape is not None:
        _active_tape._record(op, inputs, out, replay_fn)
    return out


def ancestors(tensor: Tensor) -> Iterator[Tensor]:
    """Yield every graph ancestor of ``tensor`` (tensor itself included)."""
    seen: set[int] = set()
    stack = [tensor]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        yield node
        stack.extend(node.parents)


class Graph:
    """An ordered, replayable record of the primitive ops executed under it.

    Used as a context manager around graph construction:

        with Graph() as g:
            y = ops.matmul(a, b)
        again = g.replay()

    ``replay`` re-executes the recorded primitives in order and returns the
    computed value for every recorded output node id.  Replays are
    bit-deterministic: the same record and leaf values give identical bytes.
    """

    def __init__(self) -> None:
        self.records: list[tuple[str, tuple[int, ...], int, Callable]] = []
        self.leaf_values: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Graph":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._prev

    def _record(self, op, inputs, out, replay_fn) -> None:
        if replay_fn is None:
            return
        produced = {rec[2] for rec in self.records}
        for t in inputs:
            if t.node_id not in produced and t.node_id not in self.leaf_values:
                self.leaf_values[t.node_id] = t.data
        self.records.append((op, tuple(t.node_id for t in inputs), out.node_id, replay_fn))

    def replay(self, leaf_values: Optional[dict[int, np.ndarray]] = None) -> dict[int, np.ndarray]:
        values = dict(self.leaf_values)
        if leaf_values:
            values.update(leaf_values)
        for op, input_ids, out_id, fn in self.records:
            try:
                args = [values[i] for i in input_ids]
            except KeyError as exc:
                raise AutodiffError(f"replay of {op}: missing input node {exc}") from None
            values[out_id] = fn(*args)
        return values


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    allow_unreachable: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned tensors are themselves graph nodes, so
    they can be differentiated again.  A wrt tensor that is not an ancestor
    of ``output`` raises UnreachableGradientError unless ``allow_unreachable``
    is set, in which case its gradient is a detached zero tensor (needed by
    training configurations that sever the propagation branch).
    """
    from . import ops

    if output.shape != ():
        raise AutodiffError(f"grad: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not isinstance(w, Tensor):
            raise AutodiffError("grad: wrt entries must be Tensors")
        if not w.requires_grad:
            raise AutodiffError("grad: wrt tensor does not require grad")

    # Topological order over the recorded DAG (iterative post-order).
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[Tensor] = [output]
    while stack:
        node = stack.pop()
        if node is None:
            order.append(stack.pop())
            continue
        mark = state.get(id(node), 0)
        if mark:
            continue
        state[id(node)] = 1
        stack.append(node)
        stack.append(None)  # sentinel: emit after children
        for p in node.parents:
            if id(p) not in state:
                stack.append(p)

    reachable = {id(n) for n in order}
    unreachable = [w for w in wrt if id(w) not in reachable]
    if unreachable and not allow_unreachable:
        raise UnreachableGradientError(
            f"grad: {len(unreachable)} wrt tensor(s) unreachable from output "
            f"(first: {unreachable[0]!r}); a gradient barrier such as argmax-rows "
            "or a detach may sever the path"
        )

    adjoints: dict[int, Tensor] = {id(output): ops.constant(np.ones(()))}
    ctx = no_grad() if not create_graph else _nullcontext()
    with ctx:
        for node in reversed(order):
            g = adjoints.get(id(node))
            if g is None or node.vjp is None:
                continue
            contributions = node.vjp(g)
            for parent, contrib in zip(node.parents, contributions):
                if contrib is None or not parent.requires_grad:
                    continue
                held = adjoints.get(id(parent))
                adjoints[id(parent)] = contrib if held is None else ops.add(held, contrib)

    results: list[Tensor] = []
    for w in wrt:
        g = adjoints.get(id(w))
        if g is None:
            g = ops.constant(np.zeros(w.shape))
        elif not create_graph and (g.parents or g.requires_grad):
            g = g.detach()
        results.append(g)
    return results


@contextmanager
def _nullcontext() -> Iterator[None]:
    yield


def assert_untainted(*tensors: Tensor) -> None:
    """Raise if any tensor has a tainted source anywhere in its ancestry.

    Taint flags propagate eagerly through every op (including detach and
    argmax barriers), so checking the node flag is equivalent to a walk of
    the graph's input set; the walk is still performed for leaves created
    before eager propagation could see them.
    """
    for t in tensors:
        if t is None:
            continue
        if t.tainted:
            raise TaintError(f"tainted tensor reached a quarantined computation: {t!r}")
        for a in ancestors(t):
            if a.tainted:
                raise TaintError(f"tainted ancestor {a!r} feeds {t!r}")


class TaintError(AutodiffError):
    """Quarantined ground-truth labels leaked into adaptation or pseudo-labeling."""
