"""Wiring between configuration and the training/evaluation machinery:
source and network construction, length-scale calibration, the training
loop with checkpoint/resume, evaluation, embedding export, and the
modulation-overhead benchmark.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import rng as rng_mod
from ..autodiff import Tensor, no_grad
from ..episodes import BlobFamily, Episode, ShapeFamily, load_dataset, sample_episode
from ..metaloop import (
    AdaptationConfig,
    Adam,
    EvalReport,
    MetaParams,
    Networks,
    episode_forward,
    init_meta_params,
    meta_eval,
    meta_train_step,
)
from ..nets import Conv4Backbone, GraphConstructionNet, MLPBackbone, ModulationNet
from .checkpoint import CheckpointData, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .figures import render_eval_histogram, render_training_curves
from .metrics import MetricsWriter


def build_source(cfg: RunConfig):
    t = cfg.task
    if t.family == "blobs":
        return BlobFamily(dim=t.dim, num_classes=t.classes, separation=t.separation,
                          noise=t.noise, seed=t.data_seed)
    if t.family == "shapes":
        return ShapeFamily(image_size=t.image_size, num_classes=t.classes,
                           seed=t.data_seed)
    return load_dataset(Path(t.root))


def build_networks(cfg: RunConfig) -> Networks:
    t, m = cfg.task, cfg.model
    if m.backbone == "mlp":
        backbone = MLPBackbone(in_dim=t.dim, n_way=t.n_way, hidden=m.hidden,
                               depth=m.depth)
    else:
        backbone = Conv4Backbone(image_size=t.image_size, n_way=t.n_way,
                                 channels=m.channels)
    gcn = GraphConstructionNet(n_way=t.n_way, hidden=m.gcn_hidden,
                               num_layers=m.gcn_layers)
    tau_dim = t.n_way * t.k_shot + backbone.num_layers
    modulator = ModulationNet(tau_dim=tau_dim, out_dim=m.gcn_layers,
                              hidden=m.modulator_hidden)
    return Networks(backbone=backbone, gcn=gcn, modulator=modulator)


def adaptation_config(cfg: RunConfig) -> AdaptationConfig:
    a = cfg.adaptation
    return AdaptationConfig(inner_steps=a.inner_steps, inner_lr=a.inner_lr,
                            outer_lr=a.outer_lr, meta_batch=a.meta_batch,
                            prop_loss_weight=a.prop_loss_weight,
                            second_order=a.second_order, modulation=a.modulation,
                            pseudo_labels=a.pseudo_labels, knn_k=cfg.model.knn_k)


def calibrate_length_scales(params: MetaParams, networks: Networks,
                            cfg: RunConfig, source) -> None:
    """Set the graph net's output bias so initial length scales sit at the
    episode's logit distance scale instead of exp(0)=1.

    A probe episode gives the mean pairwise squared logit distance; the bias
    is chosen so typical scaled distances land around sqrt(c), keeping the
    kernel informative from the first step.  The modulator halves the raw
    score at its own zero-bias init (gamma = 0.5), which the division
    compensates for.  With scale_init set to a number the probe is skipped.
    """
    if cfg.model.scale_init != "auto":
        sigma0 = float(cfg.model.scale_init)
    else:
        probe_rng = rng_mod.stream(cfg.run.seed, "calibration")
        episode = sample_episode(source.split("train"), cfg.task.n_way,
                                 cfg.task.k_shot, cfg.task.queries, probe_rng)
        x = np.concatenate([episode.support_x, episode.query_x])
        with no_grad():
            logits, _ = networks.backbone.forward(Tensor(x), params.theta)
        z = logits.data
        d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(-1)
        mean_d2 = float(d2[~np.eye(len(z), dtype=bool)].mean())
        sigma0 = float(np.sqrt(mean_d2 / _CALIBRATION_SHARPNESS))
    gamma_at_init = 0.5 if cfg.adaptation.modulation == "on" else 1.0
    params.phi[-1][1].data[:] = np.log(sigma0) / gamma_at_init


_CALIBRATION_SHARPNESS = 16.0


def build_params(cfg: RunConfig, networks: Networks, source) -> MetaParams:
    params = init_meta_params(networks, cfg.model.alpha_init,
                              rng_mod.stream(cfg.run.seed, "init"))
    calibrate_length_scales(params, networks, cfg, source)
    return params


def make_optimizer(cfg: RunConfig) -> Adam:
    return Adam(cfg.adaptation.outer_lr,
                {"alpha_raw": cfg.adaptation.alpha_lr_scale})


def params_to_arrays(params: MetaParams) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named_tensors()}


def arrays_to_params(params: MetaParams, arrays: dict[str, np.ndarray]) -> None:
    for name, tensor in params.named_tensors():
        if name not in arrays:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                f"model expects {tensor.data.shape}")
        tensor.data = arrays[name].copy()


@dataclass
class TrainResult:
    params: MetaParams
    networks: Networks
    final_eval: Optional[EvalReport]
    metrics_path: Path
    checkpoint_path: Path


def _sample_eval_episodes(cfg: RunConfig, source, count: int,
                          seed: Optional[int] = None) -> list[Episode]:
    erng = rng_mod.stream(cfg.run.seed if seed is None else seed, "eval-sampling")
    return [sample_episode(source.split("test"), cfg.task.n_way, cfg.task.k_shot,
                           cfg.task.queries, erng) for _ in range(count)]


def train(cfg: RunConfig, out_dir: Path, resume: Optional[Path] = None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        cfg = parse_config(ckpt.config_text)
    source = build_source(cfg)
    networks = build_networks(cfg)
    acfg = adaptation_config(cfg)
    optimizer = make_optimizer(cfg)

    if resume is not None:
        params = init_meta_params(networks, cfg.model.alpha_init,
                                  rng_mod.stream(cfg.run.seed, "init"))
        arrays_to_params(params, ckpt.params)
        optimizer.step_count = ckpt.optimizer_step
        optimizer.m = {k[2:]: v for k, v in ckpt.optimizer_moments.items()
                       if k.startswith("m:")}
        optimizer.v = {k[2:]: v for k, v in ckpt.optimizer_moments.items()
                       if k.startswith("v:")}
        sampling = rng_mod.restore_generator(ckpt.rng_states["sampling"])
        start = ckpt.iteration
    else:
        params = build_params(cfg, networks, source)
        sampling = rng_mod.stream(cfg.run.seed, "sampling")
        start = 0

    config_text = cfg.to_text()
    writer = MetricsWriter(out_dir / "metrics.jsonl", config_text, cfg.run.seed)

    def checkpoint(iteration: int, path: Path) -> None:
        moments = {f"m:{k}": v for k, v in optimizer.m.items()}
        moments.update({f"v:{k}": v for k, v in optimizer.v.items()})
        save_checkpoint(path, CheckpointData(
            config_text=config_text, iteration=iteration,
            params=params_to_arrays(params), optimizer_step=optimizer.step_count,
            optimizer_moments=moments,
            rng_states={"sampling": rng_mod.generator_state(sampling)}))

    records = []
    for step in range(start, cfg.run.iterations):
        episodes = [sample_episode(source.split("train"), cfg.task.n_way,
                                   cfg.task.k_shot, cfg.task.queries, sampling)
                    for _ in range(cfg.adaptation.meta_batch)]
        record = meta_train_step(params, episodes, networks, acfg, optimizer)
        writer.write_step(step + 1, record, timing=cfg.run.timing)
        records.append({"step": step + 1, **record})
        every = cfg.run.checkpoint_every
        if every and (step + 1) % every == 0 and step + 1 < cfg.run.iterations:
            checkpoint(step + 1, out_dir / f"checkpoint_{step + 1:06d}.tapl")

    final_path = out_dir / "checkpoint_final.tapl"
    checkpoint(cfg.run.iterations, final_path)

    final_eval = None
    if cfg.run.eval_episodes > 0:
        episodes = _sample_eval_episodes(cfg, source, cfg.run.eval_episodes)
        final_eval = meta_eval(params, episodes, networks, acfg)
        writer.write_final_eval(final_eval.summary(), cfg.run.seed)
    writer.close()
    render_training_curves(records, out_dir / "training_curves.png")
    return TrainResult(params=params, networks=networks, final_eval=final_eval,
                       metrics_path=out_dir / "metrics.jsonl",
                       checkpoint_path=final_path)


@dataclass
class LoadedModel:
    cfg: RunConfig
    networks: Networks
    params: MetaParams
    source: object


def load_model(checkpoint_path: Path) -> LoadedModel:
    ckpt = load_checkpoint(checkpoint_path)
    cfg = parse_config(ckpt.config_text)
    networks = build_networks(cfg)
    params = init_meta_params(networks, cfg.model.alpha_init,
                              rng_mod.stream(cfg.run.seed, "init"))
    arrays_to_params(params, ckpt.params)
    return LoadedModel(cfg=cfg, networks=networks, params=params,
                       source=build_source(cfg))


def evaluate(model: LoadedModel, episodes_count: int, seed: Optional[int],
             out_dir: Path) -> EvalReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes = _sample_eval_episodes(model.cfg, model.source, episodes_count, seed)
    report = meta_eval(model.params, episodes, model.networks,
                       adaptation_config(model.cfg))
    with open(out_dir / "eval_episodes.csv", "w") as fh:
        fh.write("episode,query_acc,pseudo_acc\n")
        for i in range(report.episodes):
            pseudo = ("" if report.per_episode_pseudo is None
                      else f"{report.per_episode_pseudo[i]:.6f}")
            fh.write(f"{i},{report.per_episode_accuracy[i]:.6f},{pseudo}\n")
    import json

    (out_dir / "eval_report.json").write_text(
        json.dumps(report.summary(), indent=2) + "\n")
    render_eval_histogram(report.per_episode_accuracy, report.summary(),
                          out_dir / "eval_accuracy.png")
    return report


def export_embeddings(model: LoadedModel, episodes_count: int, seed: Optional[int],
                      out_dir: Path) -> Path:
    """Per-sample penultimate features with ground-truth and pseudo labels,
    one CSV row per sample, plus a scatter rendering."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    acfg = adaptation_config(cfg)
    episodes = _sample_eval_episodes(cfg, model.source, episodes_count, seed)
    rows = []
    all_features, all_gt, all_roles, all_pseudo = [], [], [], []
    for index, episode in enumerate(episodes):
        fwd = episode_forward(model.params, episode.without_query_labels(),
                              model.networks, replace(acfg, second_order=False))
        feats = fwd.features_all.data
        if feats.shape[0] != episode.n_support + episode.n_query:
            raise ConfigError("feature rows do not match episode size")
        pseudo = (fwd.prop.pseudo_labels if fwd.prop is not None
                  else np.full(episode.n_query, -1))
        for i in range(feats.shape[0]):
            is_support = i < episode.n_support
            gt = (episode.support_y[i] if is_support
                  else episode.query_y[i - episode.n_support])
            pseudo_cell = "" if is_support else str(int(pseudo[i - episode.n_support]))
            rows.append((index, "support" if is_support else "query", int(gt),
                         pseudo_cell, feats[i]))
            all_features.append(feats[i])
            all_gt.append(int(gt))
            all_roles.append("support" if is_support else "query")
            all_pseudo.append(int(gt) if is_support else int(pseudo[i - episode.n_support]))
    feature_dim = len(rows[0][4])
    csv_path = out_dir / "embeddings.csv"
    with open(csv_path, "w") as fh:
        header = ",".join(f"f{i}" for i in range(feature_dim))
        fh.write(f"episode,role,gt_class,pseudo_class,{header}\n")
        for episode_id, role, gt, pseudo_cell, feats in rows:
            values = ",".join(f"{v:.8g}" for v in feats)
            fh.write(f"{episode_id},{role},{gt},{pseudo_cell},{values}\n")
    from .figures import render_embedding_scatter

    render_embedding_scatter(np.asarray(all_features), np.asarray(all_gt),
                             all_roles, np.asarray(all_pseudo),
                             out_dir / "embeddings.png")
    return csv_path


def bench(cfg: RunConfig, iterations: int, out_dir: Path) -> dict:
    """Per-iteration wall time with modulation on vs bypassed (gamma = 1,
    zero modulator forwards); 5 warm-up iterations excluded."""
    if iterations < 20:
        raise ConfigError("bench needs at least 20 measured iterations")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = build_source(cfg)
    timings: dict[str, np.ndarray] = {}
    calls: dict[str, int] = {}
    for mode in ("on", "ones"):
        mode_cfg = replace(cfg, adaptation=replace(cfg.adaptation, modulation=mode))
        networks = build_networks(mode_cfg)
        acfg = adaptation_config(mode_cfg)
        params = build_params(mode_cfg, networks, source)
        optimizer = make_optimizer(mode_cfg)
        sampling = rng_mod.stream(cfg.run.seed, "sampling")
        times = []
        networks.modulator.forward_calls = 0
        for i in range(iterations + 5):
            episodes = [sample_episode(source.split("train"), cfg.task.n_way,
                                       cfg.task.k_shot, cfg.task.queries, sampling)
                        for _ in range(cfg.adaptation.meta_batch)]
            started = time.perf_counter()
            meta_train_step(params, episodes, networks, acfg, optimizer)
            if i >= 5:
                times.append((time.perf_counter() - started) * 1000.0)
        timings[mode] = np.asarray(times)
        calls[mode] = networks.modulator.forward_calls
    modulated, bypassed = timings["on"], timings["ones"]
    report = {
        "iterations": iterations,
        "modulated_mean_ms": float(modulated.mean()),
        "modulated_std_ms": float(modulated.std()),
        "bypassed_mean_ms": float(bypassed.mean()),
        "bypassed_std_ms": float(bypassed.std()),
        "overhead_pct": float((modulated.mean() - bypassed.mean())
                              / bypassed.mean() * 100.0),
        "modulated_forward_calls": calls["on"],
        "bypassed_forward_calls": calls["ones"],
    }
    import json

    (out_dir / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    from .figures import render_bench

    render_bench(report, out_dir / "bench.png")
    return report
