"""Task representation: per-layer backbone parameter means concatenated
with per-sample support logit means."""

from __future__ import annotations

from .autodiff import Tensor, ops
from .nets import Params


class EmbeddingError(Exception):
    pass


def task_embedding_dim(n_way: int, k_shot: int, num_layers: int) -> int:
    return n_way * k_shot + num_layers


def build_task_embedding(theta: Params, support_logits: Tensor,
                         n_way: int, k_shot: int) -> Tensor:
    """The task vector: [M layer-parameter means] ++ [NK support-logit means].

    Layer means pool a layer's weights and biases into one scalar; logit
    means reduce each support row over its N entries.  Support rows must be
    in the episode's canonical class-major, shot-minor order, which fixes
    the layout for checkpoint compatibility.
    """
    expected_rows = n_way * k_shot
    if support_logits.data.ndim != 2 or support_logits.shape[0] != expected_rows:
        raise EmbeddingError(
            f"support logits have {support_logits.shape[0] if support_logits.data.ndim else 0} "
            f"rows, expected N*K = {expected_rows}"
        )
    pieces = []
    for layer in theta:
        flat = ops.concat([ops.reshape(t, (t.size,)) for t in layer])
        pieces.append(ops.reshape(ops.mean(flat), (1,)))
    pieces.append(ops.mean(support_logits, axis=1))
    return ops.concat(pieces)
