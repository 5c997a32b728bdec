"""Bi-level loop contracts: pipeline wiring, adaptation mechanics, the dual
outer loss, meta updates, evaluation, and transductive hygiene."""

import copy
from dataclasses import replace

import numpy as np
import pytest

from metaprop import propagation as prop_mod
from metaprop.autodiff import TaintError, Tensor, grad, ops
from metaprop.episodes import BlobFamily, sample_episode
from metaprop.metaloop import (
    AdaptationConfig,
    Adam,
    EpisodeFailure,
    MetaLoopError,
    MetaParams,
    Networks,
    episode_forward,
    init_meta_params,
    inner_adapt,
    meta_eval,
    meta_train_step,
    outer_loss,
)
from metaprop.nets import (
    GraphConstructionNet,
    MLPBackbone,
    ModulationNet,
    flatten_params,
)
from metaprop.rng import stream


def make_setup(dim=8, n_way=5, k_shot=1, depth=2, seed=0, **cfg_kw):
    networks = Networks(
        backbone=MLPBackbone(in_dim=dim, n_way=n_way, hidden=16, depth=depth),
        gcn=GraphConstructionNet(n_way=n_way, hidden=16, num_layers=2),
        modulator=ModulationNet(tau_dim=n_way * k_shot + depth, out_dim=2, hidden=32),
    )
    cfg = AdaptationConfig(**cfg_kw)
    params = init_meta_params(networks, 0.99, stream(seed, "init"))
    return networks, cfg, params


def blob_episode(seed, split="train", n_way=5, k_shot=1, q=15, separation=6.0):
    fam = BlobFamily(dim=8, num_classes=25, separation=separation, noise=1.0, seed=99)
    return sample_episode(fam.split(split), n_way, k_shot, q, np.random.default_rng(seed))


# --- episode_forward -------------------------------------------------------------


def test_gamma_ones_bit_identical_to_modulator_removed():
    networks, _, params = make_setup()
    ep = blob_episode(0)
    ones_fwd = episode_forward(params, ep, networks, AdaptationConfig(modulation="ones"))
    off_fwd = episode_forward(params, ep, networks, AdaptationConfig(modulation="off"))
    for a, b in [(ones_fwd.prop.similarity, off_fwd.prop.similarity),
                 (ones_fwd.prop.graph, off_fwd.prop.graph),
                 (ones_fwd.prop.scores, off_fwd.prop.scores)]:
        assert a.data.tobytes() == b.data.tobytes()
    assert np.array_equal(ones_fwd.prop.pseudo_labels, off_fwd.prop.pseudo_labels)
    for a, b in zip(flatten_params(ones_fwd.theta_adapted),
                    flatten_params(off_fwd.theta_adapted)):
        assert a.data.tobytes() == b.data.tobytes()


def test_untrained_pseudo_labels_beat_chance():
    networks, cfg, params = make_setup()
    hits = total = 0
    for seed in range(100):
        ep = blob_episode(seed)
        fwd = episode_forward(params, ep, networks, cfg)
        hits += int((fwd.prop.pseudo_labels == ep.query_y).sum())
        total += ep.n_query
    chance_upper = 0.2 + 1.96 * np.sqrt(0.2 * 0.8 / total)
    assert hits / total > chance_upper


def test_zero_inner_steps_is_identity():
    networks, _, params = make_setup()
    cfg = AdaptationConfig(inner_steps=0)
    fwd = episode_forward(params, blob_episode(1), networks, cfg)
    for adapted, original in zip(flatten_params(fwd.theta_adapted),
                                 flatten_params(params.theta)):
        assert adapted is original


# --- inner_adapt -----------------------------------------------------------------


def test_zero_learning_rate_keeps_theta():
    networks, _, params = make_setup()
    cfg = AdaptationConfig(inner_lr=0.0, inner_steps=3)
    ep = blob_episode(2)
    adapted, _ = inner_adapt(params.theta, Tensor(ep.support_x), ep.support_y,
                             networks, cfg)
    for a, b in zip(flatten_params(adapted), flatten_params(params.theta)):
        assert a.data.tobytes() == b.data.tobytes()


def test_one_step_matches_hand_computed_sgd():
    # single linear layer: dCE/dW = X^T (softmax - onehot) / B, dCE/db = mean
    networks = Networks(
        backbone=MLPBackbone(in_dim=3, n_way=2, depth=1),
        gcn=GraphConstructionNet(n_way=2),
        modulator=ModulationNet(tau_dim=3, out_dim=2),
    )
    rng = np.random.default_rng(5)
    w0, b0 = rng.normal(size=(3, 2)), rng.normal(size=2)
    theta = [[Tensor(w0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)]]
    x = rng.normal(size=(4, 3))
    y = np.array([0, 1, 1, 0])
    eta = 0.05
    adapted, losses = inner_adapt(theta, Tensor(x), y,
                                  networks, AdaptationConfig(inner_steps=1, inner_lr=eta))
    logits = x @ w0 + b0
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    delta = probs.copy()
    delta[np.arange(4), y] -= 1.0
    gw = x.T @ delta / 4
    gb = delta.mean(axis=0)
    assert np.allclose(adapted[0][0].data, w0 - eta * gw, atol=1e-12)
    assert np.allclose(adapted[0][1].data, b0 - eta * gb, atol=1e-12)
    assert len(losses) == 1


def test_inner_loss_non_increasing_on_separable_blobs():
    networks, cfg, params = make_setup()
    ok = 0
    for seed in range(100):
        ep = blob_episode(seed, separation=8.0)
        fwd = episode_forward(params, ep, networks, cfg)
        diffs = np.diff(fwd.inner_losses)
        if (diffs <= 1e-12).all():
            ok += 1
    assert ok >= 95


def test_non_finite_inner_loss_names_step():
    networks, cfg, params = make_setup()
    params.theta[0][0].data[:] = np.inf
    with pytest.raises(MetaLoopError) as err:
        inner_adapt(params.theta, Tensor(np.ones((4, 8))), np.zeros(4, dtype=np.int64),
                    networks, cfg)
    assert "step 0" in str(err.value)


# --- outer_loss ------------------------------------------------------------------


def test_lambda_zero_reduces_to_maml_meta_loss():
    networks, _, params = make_setup()
    ep = blob_episode(3)
    cfg = AdaptationConfig(prop_loss_weight=0.0)
    fwd = episode_forward(params, ep, networks, cfg)
    loss, _ = outer_loss(params, ep, fwd, networks, cfg)
    from metaprop.metaloop import adapted_query_logits

    expected = ops.cross_entropy_with_targets(
        adapted_query_logits(fwd, ep, networks), ep.query_y)
    assert loss.item() == pytest.approx(expected.item(), rel=1e-12)


def test_perfect_scores_and_logits_give_near_zero_loss():
    networks, cfg, params = make_setup(n_way=3, k_shot=1)
    ep = blob_episode(4, n_way=3, q=6)
    fwd = episode_forward(params, ep, networks, cfg)
    onehot = np.zeros((ep.n_query, 3))
    onehot[np.arange(ep.n_query), ep.query_y] = 1.0
    # overwrite the forward with an idealized one: hardened softmax inputs x100
    f_perfect = np.zeros((ep.n_support + ep.n_query, 3))
    f_perfect[ep.n_support:] = onehot * 100.0
    fwd.prop.scores = Tensor(f_perfect)
    perfect_logits = np.zeros((ep.n_support + ep.n_query, 3))
    perfect_logits[ep.n_support:] = onehot * 100.0

    class Perfect:
        n_way = 3

        def forward(self, x, params):
            return Tensor(perfect_logits), None

    perfect_networks = Networks(Perfect(), networks.gcn, networks.modulator)
    loss, metrics = outer_loss(params, ep, fwd, perfect_networks, cfg)
    assert loss.item() <= 1e-6
    assert metrics["query_acc"] == 1.0


def test_phi_gets_gradient_despite_hard_label_barrier():
    networks, cfg, params = make_setup()
    ep = blob_episode(5)
    fwd = episode_forward(params, ep, networks, cfg)
    loss, _ = outer_loss(params, ep, fwd, networks, cfg)
    grads = grad(loss, flatten_params(params.phi), allow_unreachable=False)
    assert all(np.abs(g.data).sum() > 0 for g in grads)


def test_outer_loss_requires_ground_truth():
    networks, cfg, params = make_setup()
    ep = blob_episode(6).without_query_labels()
    fwd = episode_forward(params, ep, networks, cfg)
    with pytest.raises(MetaLoopError):
        outer_loss(params, ep, fwd, networks, cfg)


# --- meta_train_step --------------------------------------------------------------


def test_zero_outer_lr_leaves_params_and_metrics_identical():
    networks, _, params = make_setup()
    cfg = AdaptationConfig(outer_lr=0.0)
    episodes = [blob_episode(s) for s in range(4)]
    before = [t.data.copy() for t in params.tensors()]
    opt = Adam(lr=0.0)
    m1 = meta_train_step(params, episodes, networks, cfg, opt)
    m2 = meta_train_step(params, episodes, networks, cfg, opt)
    for t, b in zip(params.tensors(), before):
        assert t.data.tobytes() == b.tobytes()
    for key in ("outer_loss", "query_acc", "pseudo_acc", "alpha", "gamma_mean"):
        assert m1[key] == m2[key]


def test_single_episode_batch_is_plain_mean():
    networks, cfg, params = make_setup()
    ep = blob_episode(7)
    fwd = episode_forward(params, ep, networks, cfg)
    loss, _ = outer_loss(params, ep, fwd, networks, cfg)
    metrics = meta_train_step(params, [ep], networks, cfg, Adam(lr=0.0))
    assert metrics["outer_loss"] == pytest.approx(loss.item(), rel=1e-12)


def test_episode_failure_carries_index():
    networks, cfg, params = make_setup()
    good = blob_episode(8)
    bad = replace_episode_dim(good)
    with pytest.raises(EpisodeFailure) as err:
        meta_train_step(params, [good, bad], networks, cfg, Adam(lr=1e-3))
    assert "episode 1" in str(err.value)


def replace_episode_dim(ep):
    from dataclasses import replace as dc_replace

    return dc_replace(ep, support_x=ep.support_x[:, :4], query_x=ep.query_x[:, :4])


def test_adam_updates_all_groups():
    networks, cfg, params = make_setup()
    episodes = [blob_episode(s) for s in range(2)]
    before = {name: t.data.copy() for name, t in params.named_tensors()}
    meta_train_step(params, episodes, networks, cfg, Adam(lr=1e-3))
    changed = {name for name, t in params.named_tensors()
               if not np.array_equal(t.data, before[name])}
    assert any(n.startswith("theta") for n in changed)
    assert any(n.startswith("phi") for n in changed)
    assert any(n.startswith("psi") for n in changed)
    assert "alpha_raw" in changed


def test_psi_phi_receive_nonzero_outer_gradients_19_of_20():
    nonzero = 0
    for seed in range(20):
        networks, cfg, params = make_setup(seed=seed)
        ep = blob_episode(seed + 200)
        fwd = episode_forward(params, ep, networks, cfg)
        loss, _ = outer_loss(params, ep, fwd, networks, cfg)
        grads = grad(loss, flatten_params(params.psi) + flatten_params(params.phi),
                     allow_unreachable=True)
        if all(np.abs(g.data).sum() > 0 for g in grads):
            nonzero += 1
    assert nonzero >= 19


# --- order of differentiation -------------------------------------------------------


def _fd_over_params(f, tensors, h=1e-5):
    out = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f()
            flat[j] = orig - h
            fm = f()
            flat[j] = orig
            g.reshape(-1)[j] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def test_second_vs_first_order_gradients_differ_and_both_pass_fd():
    networks = Networks(
        backbone=MLPBackbone(in_dim=4, n_way=3, hidden=4, depth=2),
        gcn=GraphConstructionNet(n_way=3, hidden=4),
        modulator=ModulationNet(tau_dim=5, out_dim=2),
    )
    params = init_meta_params(networks, 0.99, stream(3, "init"))
    fam = BlobFamily(dim=4, num_classes=25, separation=4.0, noise=1.0, seed=8)
    ep = sample_episode(fam.split("train"), 3, 1, 6, np.random.default_rng(1))
    base_cfg = AdaptationConfig(inner_steps=1, pseudo_labels=False, meta_batch=1)
    theta_flat = flatten_params(params.theta)

    def objective(cfg):
        fwd = episode_forward(params, ep, networks, cfg)
        loss, _ = outer_loss(params, ep, fwd, networks, cfg)
        return loss

    second = grad(objective(replace(base_cfg, second_order=True)), theta_flat,
                  allow_unreachable=True)
    first = grad(objective(replace(base_cfg, second_order=False)), theta_flat,
                 allow_unreachable=True)
    diff = sum(float(np.abs(a.data - b.data).sum()) for a, b in zip(second, first))
    assert diff > 0

    # full objective: finite differences see the inner gradient's dependence
    numeric_full = _fd_over_params(
        lambda: float(objective(replace(base_cfg, second_order=True)).data), theta_flat)
    for a, n in zip(second, numeric_full):
        rel = np.abs(a.data - n) / np.maximum(1.0, np.abs(n))
        assert rel.max() < 1e-4

    # stop-gradient objective: freeze the inner gradient at the base point
    logits0, _ = networks.backbone.forward(Tensor(ep.support_x), params.theta)
    inner0 = ops.cross_entropy_with_targets(logits0, ep.support_y)
    frozen = [g.data.copy() for g in grad(inner0, theta_flat)]

    def stop_grad_objective() -> float:
        stepped = [Tensor(p.data - base_cfg.inner_lr * g) for p, g in zip(theta_flat, frozen)]
        from metaprop.nets import rebuild_like

        theta_prime = rebuild_like(params.theta, stepped)
        x_all = Tensor(np.concatenate([ep.support_x, ep.query_x]))
        logits, _ = networks.backbone.forward(x_all, theta_prime)
        q = logits.data[ep.n_support:]
        shifted = q - q.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        return float(np.mean(lse - shifted[np.arange(len(q)), ep.query_y]))

    numeric_stop = _fd_over_params(stop_grad_objective, theta_flat)
    for a, n in zip(first, numeric_stop):
        rel = np.abs(a.data - n) / np.maximum(1.0, np.abs(n))
        assert rel.max() < 1e-4


# --- entropy connection ---------------------------------------------------------


def _mean_entropy(logits: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return float(-(p * np.log(np.clip(p, 1e-300, None))).sum(axis=1).mean())


@pytest.fixture(scope="module")
def trained_model():
    """A briefly meta-trained model; entropy behavior is a property of the
    trained learner, whose predictions align with the propagated labels."""
    from metaprop.harness.config import RunConfig
    from metaprop.harness.run import adaptation_config, build_networks, build_params

    config = RunConfig()
    config.run.seed = 77
    config.task.separation = 8.0
    config.adaptation.inner_steps = 2
    config.validate()
    fam = BlobFamily(dim=16, num_classes=25, separation=8.0, noise=1.0,
                     seed=config.task.data_seed)
    networks = build_networks(config)
    cfg = adaptation_config(config)
    params = build_params(config, networks, fam)
    opt = Adam(config.adaptation.outer_lr, {"alpha_raw": 0.1})
    rng = stream(77, "sampling")
    for _ in range(150):
        eps = [sample_episode(fam.split("train"), 5, 1, config.task.queries, rng)
               for _ in range(4)]
        meta_train_step(params, eps, networks, cfg, opt)
    return networks, cfg, params, fam


def test_inner_step_on_pseudo_labels_does_not_increase_entropy(trained_model):
    networks, cfg, params, fam = trained_model
    ok = 0
    for seed in range(100):
        ep = sample_episode(fam.split("train"), 5, 1, 25,
                            np.random.default_rng(seed + 500))
        fwd = episode_forward(params, ep, networks, cfg)
        qx = Tensor(ep.query_x)
        before_logits, _ = networks.backbone.forward(qx, params.theta)
        adapted, _ = inner_adapt(params.theta, qx, fwd.prop.pseudo_labels, networks,
                                 replace(cfg, inner_steps=1, second_order=False))
        after_logits, _ = networks.backbone.forward(qx, adapted)
        if _mean_entropy(after_logits.data) <= _mean_entropy(before_logits.data) + 1e-9:
            ok += 1
    assert ok >= 90


# --- meta_eval -------------------------------------------------------------------


def test_meta_eval_reports_both_accuracies_and_ci():
    networks, cfg, params = make_setup()
    episodes = [blob_episode(s, split="test") for s in range(8)]
    report = meta_eval(params, episodes, networks, cfg)
    assert report.episodes == 8
    assert 0.0 <= report.accuracy <= 1.0
    assert report.pseudo_accuracy is not None
    assert report.ci95 >= 0.0


def test_single_episode_ci_is_zero():
    networks, cfg, params = make_setup()
    report = meta_eval(params, [blob_episode(0, split="test")], networks, cfg)
    assert report.ci95 == 0.0


def test_eval_order_invariance():
    networks, cfg, params = make_setup()
    episodes = [blob_episode(s, split="test") for s in range(6)]
    a = meta_eval(params, episodes, networks, cfg)
    b = meta_eval(params, list(reversed(episodes)), networks, cfg)
    assert a.accuracy == b.accuracy


def test_train_split_episodes_rejected():
    networks, cfg, params = make_setup()
    with pytest.raises(MetaLoopError):
        meta_eval(params, [blob_episode(0, split="train")], networks, cfg)


def test_leaky_label_matrix_is_caught_by_taint_audit(monkeypatch):
    networks, cfg, params = make_setup()
    episode = blob_episode(11, split="test")
    real = prop_mod.label_matrix

    def leaky(support_labels, n_classes, n_total):
        y = real(support_labels, n_classes, n_total)
        nk = len(support_labels)
        y.data[nk:, :] = 0.0
        y.data[np.arange(nk, n_total), episode.query_y] = 1.0  # the leak
        y.tainted = True
        return y

    monkeypatch.setattr(prop_mod, "label_matrix", leaky)
    with pytest.raises(TaintError):
        meta_eval(params, [episode], networks, cfg)


def test_meta_eval_determinism_and_no_pseudo_mode():
    networks, _, params = make_setup()
    cfg = AdaptationConfig(pseudo_labels=False)
    episodes = [blob_episode(s, split="val") for s in range(4)]
    a = meta_eval(params, episodes, networks, cfg)
    b = meta_eval(params, episodes, networks, cfg)
    assert a.accuracy == b.accuracy
    assert a.pseudo_accuracy is None


# --- determinism across full training steps ------------------------------------------


def test_fixed_seed_training_is_bit_deterministic():
    def run():
        networks, cfg, params = make_setup(seed=13)
        opt = Adam(lr=1e-3)
        fam = BlobFamily(dim=8, num_classes=25, separation=6.0, noise=1.0, seed=99)
        rng = stream(13, "sampling")
        records = []
        for _ in range(3):
            episodes = [sample_episode(fam.split("train"), 5, 1, 15, rng)
                        for _ in range(2)]
            records.append(meta_train_step(params, episodes, networks, cfg, opt))
        return records, [t.data.tobytes() for t in params.tensors()]

    r1, p1 = run()
    r2, p2 = run()
    assert p1 == p2
    for a, b in zip(r1, r2):
        for key in ("outer_loss", "query_acc", "pseudo_acc", "alpha", "gamma_mean"):
            assert a[key] == b[key]
