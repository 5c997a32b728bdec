"""Bi-level optimization over episodes.

Inner loop: propagate support labels to the query set, harden them, and
adapt the backbone on the fully labeled union with plain gradient steps.
Outer loop: score the adapted model on the queries' ground truth, add the
propagation cross-entropy term (which bypasses the argmax barrier), and
Adam-update backbone, graph net, modulator, and propagation strength.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, assert_untainted, grad, ops
from .embedding import build_task_embedding
from .episodes import Episode
from .nets import (
    Conv4Backbone,
    GraphConstructionNet,
    MLPBackbone,
    ModulationNet,
    Params,
    flatten_params,
    length_scales,
    modulate_params,
    rebuild_like,
)
from .propagation import AlphaParam, PropagationResult, run_propagation


class MetaLoopError(Exception):
    pass


class EpisodeFailure(MetaLoopError):
    """An upstream error annotated with the failing episode's batch index."""


@dataclass
class AdaptationConfig:
    inner_steps: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    meta_batch: int = 4
    prop_loss_weight: float = 1.0
    second_order: bool = True
    modulation: str = "on"        # on | ones (modulator bypassed) | off (removed)
    pseudo_labels: bool = True
    knn_k: int = 20

    def __post_init__(self) -> None:
        if self.inner_steps < 0:
            raise MetaLoopError("inner_steps must be >= 0")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise MetaLoopError("learning rates must be nonnegative")
        if self.prop_loss_weight < 0:
            raise MetaLoopError("prop_loss_weight must be >= 0")
        if self.modulation not in ("on", "ones", "off"):
            raise MetaLoopError(f"unknown modulation mode {self.modulation!r}")


@dataclass
class Networks:
    backbone: MLPBackbone | Conv4Backbone
    gcn: GraphConstructionNet
    modulator: ModulationNet


@dataclass
class MetaParams:
    """Everything the outer loop trains."""

    theta: Params
    phi: Params
    psi: Params
    alpha_raw: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for group, params in (("theta", self.theta), ("phi", self.phi), ("psi", self.psi)):
            for i, layer in enumerate(params):
                for tensor, tag in zip(layer, ("w", "b")):
                    named.append((f"{group}.{i}.{tag}", tensor))
        named.append(("alpha_raw", self.alpha_raw))
        return named

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def alpha(self) -> AlphaParam:
        return AlphaParam(self.alpha_raw)

    def assert_finite(self) -> None:
        for name, t in self.named_tensors():
            if not np.isfinite(t.data).all():
                raise MetaLoopError(f"parameter {name} became non-finite")


def init_meta_params(networks: Networks, alpha_init: float,
                     rng: np.random.Generator) -> MetaParams:
    theta = networks.backbone.init_params(rng)
    phi = networks.gcn.init_params(rng)
    psi = networks.modulator.init_params(rng)
    alpha = AlphaParam.from_effective(alpha_init)
    return MetaParams(theta=theta, phi=phi, psi=psi, alpha_raw=alpha.raw)


@dataclass
class EpisodeForward:
    x_all: Tensor
    logits_all: Tensor
    features_all: Tensor
    theta_adapted: Params
    prop: Optional[PropagationResult]
    tau: Optional[Tensor]
    gamma: Optional[Tensor]
    inner_losses: list[float] = field(default_factory=list)


def inner_adapt(theta: Params, inputs: Tensor, labels: np.ndarray,
                networks: Networks, cfg: AdaptationConfig) -> tuple[Params, list[float]]:
    """T_in full-batch cross-entropy steps on the labeled set.

    With the second-order flag the adapted parameters stay differentiable
    with respect to the originals; without it each step uses detached
    gradients (the first-order approximation).
    """
    current = theta
    losses: list[float] = []
    for step in range(cfg.inner_steps):
        logits, _ = networks.backbone.forward(inputs, current)
        loss = ops.cross_entropy_with_targets(logits, labels)
        if not np.isfinite(loss.data):
            raise MetaLoopError(f"non-finite inner loss at step {step}")
        flat = flatten_params(current)
        grads = grad(loss, flat, create_graph=cfg.second_order)
        stepped = [ops.sub(p, ops.scalar_mul(cfg.inner_lr, g))
                   for p, g in zip(flat, grads)]
        current = rebuild_like(current, stepped)
        losses.append(float(loss.data))
    return current, losses


def episode_forward(params: MetaParams, episode: Episode, networks: Networks,
                    cfg: AdaptationConfig) -> EpisodeForward:
    """Run one episode through the full pipeline up to the adapted backbone."""
    nk = episode.n_support
    x_all = Tensor(np.concatenate([episode.support_x, episode.query_x]))
    logits_all, features_all = networks.backbone.forward(x_all, params.theta)

    prop = tau = gamma = None
    if cfg.pseudo_labels:
        n_cols = episode.n_way
        support_idx = np.arange(nk * n_cols, dtype=np.int64).reshape(nk, n_cols)
        support_logits = ops.take(logits_all, support_idx)
        tau = build_task_embedding(params.theta, support_logits,
                                   episode.n_way, episode.k_shot)
        if cfg.modulation == "on":
            gamma = networks.modulator.forward(tau, params.psi)
            phi_episode = modulate_params(params.phi, gamma)
        elif cfg.modulation == "ones":
            gamma = ops.ones((networks.gcn.num_layers,))
            phi_episode = modulate_params(params.phi, gamma)
        else:
            phi_episode = params.phi
        sigma = length_scales(logits_all, networks.gcn, phi_episode)
        prop = run_propagation(logits_all, sigma, episode.support_y,
                               episode.n_way, params.alpha(), k=cfg.knn_k)
        adapt_inputs = x_all
        adapt_labels = np.concatenate([episode.support_y, prop.pseudo_labels])
    else:
        adapt_inputs = Tensor(episode.support_x)
        adapt_labels = episode.support_y

    theta_adapted, inner_losses = inner_adapt(params.theta, adapt_inputs,
                                              adapt_labels, networks, cfg)
    return EpisodeForward(x_all=x_all, logits_all=logits_all,
                          features_all=features_all, theta_adapted=theta_adapted,
                          prop=prop, tau=tau, gamma=gamma, inner_losses=inner_losses)


def _query_rows(t: Tensor, n_support: int, n_cols: int) -> Tensor:
    n = t.shape[0]
    idx = np.arange(n_support * n_cols, n * n_cols, dtype=np.int64)
    return ops.take(t, idx.reshape(n - n_support, n_cols))


def adapted_query_logits(fwd: EpisodeForward, episode: Episode,
                         networks: Networks) -> Tensor:
    """Adapted-backbone logits for the query rows (full-episode forward so
    batch statistics stay transductive)."""
    logits, _ = networks.backbone.forward(fwd.x_all, fwd.theta_adapted)
    return _query_rows(logits, episode.n_support, episode.n_way)


def outer_loss(params: MetaParams, episode: Episode, fwd: EpisodeForward,
               networks: Networks, cfg: AdaptationConfig) -> tuple[Tensor, dict]:
    """Dual loss: adapted-model CE on query ground truth, plus the weighted
    propagation CE computed on the pre-argmax scores (the path that lets
    gradients reach phi, psi, and alpha past the hard-label barrier)."""
    if episode.query_y is None:
        raise MetaLoopError("outer loss needs ground-truth query labels (meta-train only)")
    q_logits = adapted_query_logits(fwd, episode, networks)
    loss = ops.cross_entropy_with_targets(q_logits, episode.query_y)
    if cfg.prop_loss_weight > 0 and fwd.prop is not None:
        f_query = _query_rows(fwd.prop.scores, episode.n_support, episode.n_way)
        prop_ce = ops.cross_entropy_with_targets(f_query, episode.query_y)
        loss = ops.add(loss, ops.scalar_mul(cfg.prop_loss_weight, prop_ce))
    query_acc = float((q_logits.data.argmax(axis=1) == episode.query_y).mean())
    pseudo_acc = (float((fwd.prop.pseudo_labels == episode.query_y).mean())
                  if fwd.prop is not None else None)
    return loss, {"query_acc": query_acc, "pseudo_acc": pseudo_acc}


class Adam:
    """Adam over the named parameter tensors (beta1=0.9, beta2=0.999, eps=1e-8).

    One optimizer covers every outer-loop trainable with a single base rate;
    lr_scales optionally rescales the rate per parameter name (the sigmoid
    parameterization of the propagation strength wants a gentler rate than
    the network weights).
    """

    def __init__(self, lr: float, lr_scales: Optional[dict[str, float]] = None) -> None:
        self.lr = lr
        self.lr_scales = dict(lr_scales or {})
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params: Sequence[tuple[str, Tensor]],
             grads: Sequence[np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        for (name, param), g in zip(named_params, grads):
            lr = self.lr * self.lr_scales.get(name, 1.0)
            m = self.m.setdefault(name, np.zeros_like(param.data))
            v = self.v.setdefault(name, np.zeros_like(param.data))
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"step": self.step_count,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.m = {k: np.asarray(v).copy() for k, v in state["m"].items()}
        self.v = {k: np.asarray(v).copy() for k, v in state["v"].items()}


def meta_train_step(params: MetaParams, episodes: Sequence[Episode],
                    networks: Networks, cfg: AdaptationConfig,
                    optimizer: Adam) -> dict:
    """One outer step over a meta-batch; returns the step's metrics record."""
    if not episodes:
        raise MetaLoopError("meta batch is empty")
    started = time.perf_counter()
    total: Optional[Tensor] = None
    query_accs, pseudo_accs, gamma_means = [], [], []
    for index, episode in enumerate(episodes):
        try:
            fwd = episode_forward(params, episode, networks, cfg)
            loss, metrics = outer_loss(params, episode, fwd, networks, cfg)
        except Exception as exc:
            raise EpisodeFailure(f"episode {index}: {exc}") from exc
        total = loss if total is None else ops.add(total, loss)
        query_accs.append(metrics["query_acc"])
        if metrics["pseudo_acc"] is not None:
            pseudo_accs.append(metrics["pseudo_acc"])
        if fwd.gamma is not None:
            gamma_means.append(float(fwd.gamma.data.mean()))

    batch_loss = ops.scalar_mul(1.0 / len(episodes), total)
    named = params.named_tensors()
    # lambda = 0 or --no-pseudo legitimately sever the propagation branch,
    # leaving phi/psi/alpha unreachable; those gradients are zero.
    grads = grad(batch_loss, [t for _, t in named], allow_unreachable=True)
    grad_arrays = [g.data for g in grads]
    for (name, _), g in zip(named, grad_arrays):
        if not np.isfinite(g).all():
            raise MetaLoopError(f"aborting step: non-finite gradient for {name}")
    optimizer.step(named, grad_arrays)
    params.assert_finite()

    wall_ms = (time.perf_counter() - started) * 1000.0
    return {
        "outer_loss": float(batch_loss.data),
        "query_acc": float(np.mean(query_accs)),
        "pseudo_acc": float(np.mean(pseudo_accs)) if pseudo_accs else None,
        "alpha": params.alpha().effective_value(),
        "gamma_mean": float(np.mean(gamma_means)) if gamma_means else None,
        "wall_ms": wall_ms,
    }


@dataclass
class EvalReport:
    accuracy: float
    ci95: float
    pseudo_accuracy: Optional[float]
    pseudo_ci95: Optional[float]
    episodes: int
    per_episode_accuracy: np.ndarray
    per_episode_pseudo: Optional[np.ndarray]

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "ci95": self.ci95,
            "pseudo_accuracy": self.pseudo_accuracy,
            "pseudo_ci95": self.pseudo_ci95,
            "episodes": self.episodes,
        }


def meta_eval(params: MetaParams, episodes: Sequence[Episode], networks: Networks,
              cfg: AdaptationConfig) -> EvalReport:
    """Transductive evaluation: the pipeline never sees query ground truth.

    Labels are stripped before the forward pass; a taint audit additionally
    proves no tensor derived from them reaches adaptation or pseudo-labeling.
    GT is used only to score the already-adapted predictions.
    """
    # Adapted parameter values are identical either way; skipping the
    # second-order graph just avoids pointless bookkeeping at eval time.
    eval_cfg = replace(cfg, second_order=False)
    accs, pseudo_accs = [], []
    for index, episode in enumerate(episodes):
        if episode.split == "train":
            raise MetaLoopError(
                f"episode {index} comes from the meta-train split; evaluation "
                "episodes must use held-out classes")
        if episode.query_y is None:
            raise MetaLoopError("evaluation episodes need labels for scoring")
        stripped = episode.without_query_labels()
        try:
            fwd = episode_forward(params, stripped, networks, eval_cfg)
        except Exception as exc:
            raise EpisodeFailure(f"episode {index}: {exc}") from exc
        audit_targets = list(flatten_params(fwd.theta_adapted))
        if fwd.prop is not None:
            audit_targets.append(fwd.prop.scores)
        assert_untainted(*audit_targets)
        q_logits = adapted_query_logits(fwd, stripped, networks)
        accs.append(float((q_logits.data.argmax(axis=1) == episode.query_y).mean()))
        if fwd.prop is not None:
            pseudo_accs.append(float((fwd.prop.pseudo_labels == episode.query_y).mean()))

    acc = np.asarray(accs)
    pseudo = np.asarray(pseudo_accs) if pseudo_accs else None

    # summary statistics reduce over sorted copies so the reported mean and
    # CI are exactly independent of episode order
    def mean(values: np.ndarray) -> float:
        return float(np.sort(values).mean())

    def ci(values: np.ndarray) -> float:
        return float(1.96 * np.sort(values).std() / np.sqrt(len(values)))

    return EvalReport(
        accuracy=mean(acc), ci95=ci(acc),
        pseudo_accuracy=mean(pseudo) if pseudo is not None else None,
        pseudo_ci95=ci(pseudo) if pseudo is not None else None,
        episodes=len(acc), per_episode_accuracy=acc, per_episode_pseudo=pseudo,
    )
