"""Episode sampling over class-disjoint meta-splits, plus synthetic task
families (gaussian blobs for vector backbones, rendered shapes for the
convolutional one) and a small on-disk dataset format.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SPLITS = ("train", "val", "test")

SAMPLE_MAGIC = b"TPLT"
SAMPLE_VERSION = 1


class EpisodeError(Exception):
    pass


class SplitOverlapError(EpisodeError):
    pass


class SampleFormatError(EpisodeError):
    pass


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task in canonical class-major, shot-minor order.

    query_labels is None once quarantined for transductive evaluation; the
    pipeline then has no structural path to the ground truth.
    """

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: Optional[np.ndarray]
    n_way: int
    k_shot: int
    split: str
    sample_ids: tuple = ()

    @property
    def n_support(self) -> int:
        return self.n_way * self.k_shot

    @property
    def n_query(self) -> int:
        return self.query_x.shape[0]

    def without_query_labels(self) -> "Episode":
        return replace(self, query_y=None)


@dataclass(frozen=True)
class SplitManifest:
    """Which classes belong to which meta-split; the three lists must be
    pairwise disjoint or construction fails."""

    dataset_id: str
    train_classes: tuple[str, ...]
    val_classes: tuple[str, ...]
    test_classes: tuple[str, ...]
    checksum: str

    def __post_init__(self) -> None:
        pools = {
            "train": set(self.train_classes),
            "val": set(self.val_classes),
            "test": set(self.test_classes),
        }
        for a in SPLITS:
            for b in SPLITS:
                if a < b and pools[a] & pools[b]:
                    shared = sorted(pools[a] & pools[b])
                    raise SplitOverlapError(
                        f"classes {shared} appear in both {a!r} and {b!r}")

    def classes(self, split: str) -> tuple[str, ...]:
        if split not in SPLITS:
            raise EpisodeError(f"unknown split {split!r}")
        return getattr(self, f"{split}_classes")


def _partition_classes(names: Sequence[str]) -> tuple[tuple, tuple, tuple]:
    """Deterministic 60/20/20 split by position; every split non-empty."""
    total = len(names)
    n_side = max(1, total // 5)
    if total < 2 * n_side + 1:
        raise EpisodeError(f"{total} classes are too few for three splits")
    train = tuple(names[: total - 2 * n_side])
    val = tuple(names[total - 2 * n_side: total - n_side])
    test = tuple(names[total - n_side:])
    return train, val, test


class SplitView:
    """A source restricted to one meta-split; what sample_episode consumes."""

    def __init__(self, source, split: str) -> None:
        self.source = source
        self.split = split

    @property
    def classes(self) -> tuple[str, ...]:
        return self.source.manifest.classes(self.split)

    def sample_count(self, cls: str) -> Optional[int]:
        return self.source.sample_count(self.split, cls)

    def draw(self, cls: str, n: int, rng: np.random.Generator):
        return self.source.draw(self.split, cls, n, rng)


def sample_episode(view: SplitView, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator) -> Episode:
    """Draw an N-way K-shot episode with class-balanced queries.

    Classes are drawn without replacement and remapped to 0..N-1 in draw
    order; each class contributes K supports and Q/N queries, all distinct.
    """
    classes = view.classes
    if len(classes) < n_way:
        raise EpisodeError(
            f"split {view.split!r} has {len(classes)} classes, need {n_way}")
    if n_query % n_way:
        raise EpisodeError(f"query count {n_query} is not divisible by {n_way} classes")
    per_class_q = n_query // n_way
    need = k_shot + per_class_q

    chosen = rng.choice(len(classes), size=n_way, replace=False)
    support_x, query_x, ids = [], [], []
    for new_label, class_index in enumerate(chosen):
        cls = classes[int(class_index)]
        available = view.sample_count(cls)
        if available is not None and available < need:
            raise EpisodeError(
                f"class {cls!r} in split {view.split!r} has {available} samples, "
                f"need {need} (K={k_shot} + Q/N={per_class_q})")
        x, drawn_ids = view.draw(cls, need, rng)
        support_x.append(x[:k_shot])
        query_x.append(x[k_shot:])
        ids.extend(drawn_ids)
    support = np.concatenate(support_x)
    query = np.concatenate(query_x)
    support_y = np.repeat(np.arange(n_way), k_shot).astype(np.int64)
    query_y = np.repeat(np.arange(n_way), per_class_q).astype(np.int64)
    return Episode(support, support_y, query, query_y, n_way, k_shot,
                   view.split, tuple(ids))


# ---------------------------------------------------------------------------
# generative families


class BlobFamily:
    """Isotropic gaussian classes: each class mean is a fixed random
    direction scaled to the separation radius; samples are drawn on demand."""

    def __init__(self, dim: int, num_classes: int, separation: float,
                 noise: float, seed: int) -> None:
        if dim < 2:
            raise EpisodeError("blob family needs dim >= 2")
        if separation < 0 or noise <= 0:
            raise EpisodeError("separation must be >= 0 and noise > 0")
        self.dim = dim
        self.noise = noise
        rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x0b10b]))
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        self.means = directions * separation
        names = tuple(f"blob{i:03d}" for i in range(num_classes))
        train, val, test = _partition_classes(names)
        checksum = hashlib.sha256(self.means.tobytes()).hexdigest()[:16]
        self.manifest = SplitManifest(
            f"blobs-d{dim}-c{num_classes}-s{seed}", train, val, test, checksum)
        self._name_to_index = {n: i for i, n in enumerate(names)}
        self._id_counter = 0

    def split(self, name: str) -> SplitView:
        return SplitView(self, name)

    def sample_count(self, split: str, cls: str) -> Optional[int]:
        return None  # generative: unlimited

    def draw(self, split: str, cls: str, n: int, rng: np.random.Generator):
        mean = self.means[self._name_to_index[cls]]
        x = mean + self.noise * rng.standard_normal((n, self.dim))
        ids = tuple(range(self._id_counter, self._id_counter + n))
        self._id_counter += n
        return x, [f"{cls}#{i}" for i in ids]


_SHAPE_KINDS = ("disk", "square", "diamond", "cross", "hbar")
_COLORS = np.array([
    [1.0, 0.15, 0.15],
    [0.15, 1.0, 0.15],
    [0.2, 0.35, 1.0],
    [1.0, 0.9, 0.1],
    [0.9, 0.2, 0.9],
])


class ShapeFamily:
    """Procedural image classes: one (shape kind, color) pair per class,
    rendered at random positions and scales on black 3-channel images."""

    def __init__(self, image_size: int, num_classes: int, seed: int) -> None:
        if image_size < 16:
            raise EpisodeError("shape family needs image_size >= 16")
        combos = [(s, c) for s in range(len(_SHAPE_KINDS)) for c in range(len(_COLORS))]
        if num_classes > len(combos):
            raise EpisodeError(
                f"at most {len(combos)} (shape, color) classes available")
        self.image_size = image_size
        self.combos = combos[:num_classes]
        names = tuple(f"{_SHAPE_KINDS[s]}-{c}" for s, c in self.combos)
        train, val, test = _partition_classes(names)
        digest = hashlib.sha256(f"{image_size}:{num_classes}:{seed}".encode()).hexdigest()[:16]
        self.manifest = SplitManifest(
            f"shapes-{image_size}px-c{num_classes}-s{seed}", train, val, test, digest)
        self._name_to_combo = dict(zip(names, self.combos))
        self._id_counter = 0

    def split(self, name: str) -> SplitView:
        return SplitView(self, name)

    def sample_count(self, split: str, cls: str) -> Optional[int]:
        return None

    def _render(self, shape_kind: int, color_index: int,
                rng: np.random.Generator) -> np.ndarray:
        size = self.image_size
        img = np.zeros((3, size, size))
        radius = rng.uniform(size / 8, size / 4)
        cy = rng.uniform(radius, size - radius)
        cx = rng.uniform(radius, size - radius)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        dy, dx = yy - cy, xx - cx
        kind = _SHAPE_KINDS[shape_kind]
        if kind == "disk":
            mask = dy**2 + dx**2 <= radius**2
        elif kind == "square":
            mask = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        elif kind == "diamond":
            mask = np.abs(dy) + np.abs(dx) <= radius
        elif kind == "cross":
            arm = max(1.0, radius / 3)
            mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | \
                   ((np.abs(dx) <= arm) & (np.abs(dy) <= radius))
        else:  # hbar
            mask = (np.abs(dy) <= max(1.0, radius / 3)) & (np.abs(dx) <= radius)
        intensity = rng.uniform(0.7, 1.0)
        color = _COLORS[color_index] * intensity
        img[:, mask] = color[:, None]
        return np.clip(img, 0.0, 1.0)

    def draw(self, split: str, cls: str, n: int, rng: np.random.Generator):
        shape_kind, color_index = self._name_to_combo[cls]
        x = np.stack([self._render(shape_kind, color_index, rng) for _ in range(n)])
        ids = tuple(range(self._id_counter, self._id_counter + n))
        self._id_counter += n
        return x, [f"{cls}#{i}" for i in ids]


# ---------------------------------------------------------------------------
# finite sources, snapshots and the on-disk format


@dataclass
class FiniteSource:
    """All samples held in memory, keyed by (split, class)."""

    manifest: SplitManifest
    pools: dict = field(default_factory=dict)  # (split, cls) -> (count, input-shape) array

    def split(self, name: str) -> SplitView:
        return SplitView(self, name)

    def sample_count(self, split: str, cls: str) -> int:
        return self.pools.get((split, cls), np.empty((0,))).shape[0]

    def draw(self, split: str, cls: str, n: int, rng: np.random.Generator):
        pool = self.pools[(split, cls)]
        picked = rng.choice(pool.shape[0], size=n, replace=False)
        return pool[picked], [f"{split}/{cls}/{int(i)}" for i in picked]


def materialize(family, per_class: int, rng: np.random.Generator) -> FiniteSource:
    """Freeze a generative family into a finite pool (per_class per split)."""
    pools = {}
    for split in SPLITS:
        for cls in family.manifest.classes(split):
            x, _ = family.draw(split, cls, per_class, rng)
            pools[(split, cls)] = x
    return FiniteSource(manifest=family.manifest, pools=pools)


def write_sample(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<B", SAMPLE_VERSION))
        fh.write(struct.pack("<B", array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(array.astype("<f8").tobytes())


def read_sample(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != SAMPLE_MAGIC:
        raise SampleFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 6 or raw[4] != SAMPLE_VERSION:
        raise SampleFormatError(f"{path}: unsupported version")
    rank = raw[5]
    header_end = 6 + 4 * rank
    if len(raw) < header_end:
        raise SampleFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}I", raw[6:header_end]) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    body = raw[header_end:]
    if len(body) != 8 * count:
        raise SampleFormatError(
            f"{path}: expected {8 * count} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(dims).copy()


def save_source(source: FiniteSource, root: Path) -> None:
    root = Path(root)
    for split in SPLITS:
        for cls in source.manifest.classes(split):
            class_dir = root / split / cls
            class_dir.mkdir(parents=True, exist_ok=True)
            pool = source.pools[(split, cls)]
            for i in range(pool.shape[0]):
                write_sample(class_dir / f"sample_{i:05d}.tplt", pool[i])


def load_dataset(root: Path) -> FiniteSource:
    """Load root/{train,val,test}/<class>/<samples> and build the manifest.

    Class-name disjointness across splits is verified here; empty class
    directories load fine and only fail later, at sampling time, when an
    episode actually needs their samples.
    """
    root = Path(root)
    if not root.is_dir():
        raise EpisodeError(f"dataset root {root} is not a directory")
    class_lists: dict[str, tuple[str, ...]] = {}
    pools = {}
    digest = hashlib.sha256()
    for split in SPLITS:
        split_dir = root / split
        if not split_dir.is_dir():
            raise EpisodeError(f"dataset is missing the {split!r} directory")
        names = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
        class_lists[split] = tuple(names)
        for cls in names:
            files = sorted((split_dir / cls).glob("*.tplt"))
            samples = [read_sample(f) for f in files]
            for f in files:
                digest.update(f.name.encode())
                digest.update(hashlib.sha256(f.read_bytes()).digest())
            pools[(split, cls)] = (np.stack(samples) if samples
                                   else np.empty((0,)))
    manifest = SplitManifest(root.name, class_lists["train"], class_lists["val"],
                             class_lists["test"], digest.hexdigest()[:16])
    return FiniteSource(manifest=manifest, pools=pools)
