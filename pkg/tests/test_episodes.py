"""Episode sampling, synthetic families, and the on-disk sample format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaprop.autodiff import Tensor
from metaprop.episodes import (
    BlobFamily,
    Episode,
    EpisodeError,
    SampleFormatError,
    ShapeFamily,
    SplitManifest,
    SplitOverlapError,
    load_dataset,
    materialize,
    read_sample,
    sample_episode,
    save_source,
    write_sample,
)
from metaprop.nets import Conv4Backbone


def _blobs(**kw):
    defaults = dict(dim=8, num_classes=25, separation=6.0, noise=1.0, seed=7)
    defaults.update(kw)
    return BlobFamily(**defaults)


def test_episode_counts_and_order():
    ep = sample_episode(_blobs().split("train"), 5, 1, 15, np.random.default_rng(0))
    assert ep.support_x.shape == (5, 8) and ep.query_x.shape == (15, 8)
    assert np.array_equal(ep.support_y, np.arange(5))
    assert np.array_equal(ep.query_y, np.repeat(np.arange(5), 3))  # 3 queries per class


def test_same_seed_identical_episodes():
    fam = _blobs()
    a = sample_episode(fam.split("train"), 5, 2, 10, np.random.default_rng(42))
    b = sample_episode(_blobs().split("train"), 5, 2, 10, np.random.default_rng(42))
    assert a.support_x.tobytes() == b.support_x.tobytes()
    assert a.query_x.tobytes() == b.query_x.tobytes()


def test_query_count_must_divide():
    with pytest.raises(EpisodeError):
        sample_episode(_blobs().split("train"), 5, 1, 13, np.random.default_rng(0))


def test_insufficient_classes_names_deficit():
    fam = _blobs(num_classes=10)  # train split gets 6 classes
    with pytest.raises(EpisodeError) as err:
        sample_episode(fam.split("test"), 5, 1, 5, np.random.default_rng(0))
    assert "test" in str(err.value) and "need 5" in str(err.value)


def test_label_multiset_property():
    ep = sample_episode(_blobs().split("val"), 3, 2, 9, np.random.default_rng(5))
    combined = np.concatenate([ep.support_y, ep.query_y])
    counts = np.bincount(combined, minlength=3)
    assert np.array_equal(counts, [2 + 3] * 3)


def test_no_duplicate_sample_ids():
    fam = materialize(_blobs(), per_class=8, rng=np.random.default_rng(1))
    ep = sample_episode(fam.split("train"), 5, 2, 10, np.random.default_rng(2))
    assert len(set(ep.sample_ids)) == len(ep.sample_ids)


def test_quarantine_strips_labels():
    ep = sample_episode(_blobs().split("test"), 5, 1, 5, np.random.default_rng(3))
    stripped = ep.without_query_labels()
    assert stripped.query_y is None and ep.query_y is not None


# --- blob family -----------------------------------------------------------------


def _nearest_class_mean_accuracy(fam, episodes, rng):
    hits = total = 0
    for _ in range(episodes):
        ep = sample_episode(fam.split("train"), 5, 1, 15, rng)
        means = np.stack([ep.support_x[ep.support_y == c].mean(axis=0) for c in range(5)])
        d = ((ep.query_x[:, None, :] - means[None]) ** 2).sum(axis=2)
        hits += int((d.argmin(axis=1) == ep.query_y).sum())
        total += ep.n_query
    return hits / total


def test_well_separated_blobs_ncm_above_95():
    fam = _blobs(separation=10.0, noise=1.0)
    acc = _nearest_class_mean_accuracy(fam, 100, np.random.default_rng(11))
    assert acc > 0.95


def test_zero_separation_is_chance_level():
    fam = _blobs(separation=0.0, noise=1.0)
    acc = _nearest_class_mean_accuracy(fam, 100, np.random.default_rng(12))
    total_queries = 100 * 15
    band = 1.96 * np.sqrt(0.2 * 0.8 / total_queries)
    assert abs(acc - 0.2) < band + 0.02


def test_same_seed_same_class_means():
    assert np.array_equal(_blobs(seed=5).means, _blobs(seed=5).means)
    assert not np.array_equal(_blobs(seed=5).means, _blobs(seed=6).means)


def test_blob_dim_validation():
    with pytest.raises(EpisodeError):
        _blobs(dim=1)


# --- shape family -----------------------------------------------------------------


def test_shape_contract_and_determinism():
    fam = ShapeFamily(image_size=16, num_classes=25, seed=3)
    view = fam.split("train")
    x, _ = view.draw(view.classes[0], 4, np.random.default_rng(9))
    assert x.shape == (4, 3, 16, 16)
    assert x.min() >= 0.0 and x.max() <= 1.0
    y, _ = fam.split("train").draw(view.classes[0], 4, np.random.default_rng(9))
    assert x.tobytes() == y.tobytes()  # pixel identical under the same rng


def test_shapes_feed_conv4_end_to_end():
    fam = ShapeFamily(image_size=16, num_classes=25, seed=4)
    ep = sample_episode(fam.split("train"), 5, 5, 5, np.random.default_rng(10))
    net = Conv4Backbone(image_size=16, n_way=5, channels=8)
    params = net.init_params(np.random.default_rng(11))
    logits, _ = net.forward(Tensor(np.concatenate([ep.support_x, ep.query_x])), params)
    assert logits.shape == (30, 5)


def test_shape_family_validation():
    with pytest.raises(EpisodeError):
        ShapeFamily(image_size=8, num_classes=5, seed=0)
    with pytest.raises(EpisodeError):
        ShapeFamily(image_size=16, num_classes=26, seed=0)


# --- manifests and disk round trip --------------------------------------------------


def test_manifest_overlap_rejected():
    with pytest.raises(SplitOverlapError):
        SplitManifest("x", ("dog", "cat"), ("bird",), ("dog",), "00")


def test_sample_file_round_trip(tmp_path):
    arr = np.random.default_rng(13).normal(size=(3, 4, 5))
    path = tmp_path / "s.tplt"
    write_sample(path, arr)
    assert read_sample(path).tobytes() == arr.tobytes()


def test_sample_file_malformed(tmp_path):
    path = tmp_path / "bad.tplt"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(SampleFormatError) as err:
        read_sample(path)
    assert "bad.tplt" in str(err.value)
    trunc = tmp_path / "trunc.tplt"
    trunc.write_bytes(b"TPLT\x01\x02" + np.array([3, 4], "<u4").tobytes() + bytes(8))
    with pytest.raises(SampleFormatError):
        read_sample(trunc)


def test_disk_round_trip_reproduces_episodes(tmp_path):
    fam = materialize(_blobs(), per_class=6, rng=np.random.default_rng(21))
    save_source(fam, tmp_path / "ds")
    reloaded = load_dataset(tmp_path / "ds")
    a = sample_episode(fam.split("train"), 5, 1, 10, np.random.default_rng(77))
    b = sample_episode(reloaded.split("train"), 5, 1, 10, np.random.default_rng(77))
    assert a.support_x.tobytes() == b.support_x.tobytes()
    assert a.query_x.tobytes() == b.query_x.tobytes()
    assert np.array_equal(a.support_y, b.support_y)


def test_disk_overlap_detected(tmp_path):
    root = tmp_path / "ds"
    for split in ("train", "val", "test"):
        (root / split / "filler").mkdir(parents=True)
    (root / "train" / "dog").mkdir()
    (root / "test" / "dog").mkdir()
    with pytest.raises(SplitOverlapError):
        load_dataset(root)


def test_empty_class_defers_error_to_sampling(tmp_path):
    fam = materialize(_blobs(num_classes=25), per_class=4, rng=np.random.default_rng(2))
    root = tmp_path / "ds"
    save_source(fam, root)
    victim = sorted((root / "train").iterdir())[0]
    for f in victim.glob("*.tplt"):
        f.unlink()
    source = load_dataset(root)  # loads fine
    with pytest.raises(EpisodeError):
        for seed in range(50):  # eventually samples the empty class
            sample_episode(source.split("train"), 5, 1, 10, np.random.default_rng(seed))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sampling_without_replacement_property(seed):
    fam = materialize(_blobs(), per_class=5, rng=np.random.default_rng(3))
    ep = sample_episode(fam.split("train"), 4, 2, 12, np.random.default_rng(seed))
    assert len(set(ep.sample_ids)) == ep.n_support + ep.n_query
