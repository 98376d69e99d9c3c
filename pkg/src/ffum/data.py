"""Datasets, client shards, corruption injection and unlearning scenarios."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError, UsageError
from .seeding import rng_for

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CLEAN, BACKDOORED, CONFUSED = 0, 1, 2
CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    provenance: np.ndarray | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 2:
            raise UsageError(f"images must be [n, d], got shape {list(images.shape)}")
        if labels.shape[0] != images.shape[0]:
            raise UsageError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise UsageError(f"labels must lie in [0, {self.num_classes})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise UsageError("pixel values must lie in [0, 1]")
        prov = self.provenance
        prov = np.zeros(labels.shape[0], dtype=np.int8) if prov is None else np.asarray(prov, dtype=np.int8)
        if prov.shape != labels.shape:
            raise UsageError("provenance length must match labels")
        for arr in (images, labels, prov):
            arr.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", prov)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes, self.provenance[index])

    @staticmethod
    def concat(parts: list["LabeledDataset"]) -> "LabeledDataset":
        if not parts:
            raise UsageError("cannot concatenate zero datasets")
        return LabeledDataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].num_classes,
            np.concatenate([p.provenance for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: int
    data: LabeledDataset
    forget_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        mask = self.forget_mask
        mask = np.zeros(len(self.data), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
        if mask.shape != (len(self.data),):
            raise UsageError("forget_mask length must match shard size")
        mask.flags.writeable = False
        object.__setattr__(self, "forget_mask", mask)

    def __len__(self):
        return len(self.data)

    @property
    def n_forget(self) -> int:
        return int(self.forget_mask.sum())

    @property
    def n_retain(self) -> int:
        return len(self.data) - self.n_forget

    def forget_data(self) -> LabeledDataset:
        return self.data.subset(np.flatnonzero(self.forget_mask))

    def retain_data(self) -> LabeledDataset:
        return self.data.subset(np.flatnonzero(~self.forget_mask))


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "none"
    backdoor_target_class: int = 0
    trigger_size: int = 3
    trigger_corner: str = "bottom-right"
    trigger_value: float = 1.0
    confuse_pairs: tuple[tuple[int, int], ...] = ((1, 2), (3, 4))

    def __post_init__(self):
        object.__setattr__(self, "confuse_pairs", tuple(tuple(int(c) for c in p) for p in self.confuse_pairs))
        if self.kind not in ("backdoor", "confuse", "none"):
            raise ConfigurationError(f"corruption.kind must be backdoor, confuse or none, got {self.kind!r}")
        if self.trigger_corner not in CORNERS:
            raise ConfigurationError(f"corruption.trigger_corner must be one of {CORNERS}")
        if self.trigger_size < 1:
            raise ConfigurationError("corruption.trigger_size must be positive")
        if not 0.0 <= self.trigger_value <= 1.0:
            raise ConfigurationError("corruption.trigger_value must lie in [0, 1]")
        if self.backdoor_target_class < 0:
            raise ConfigurationError("corruption.backdoor_target_class must be non-negative")
        seen = set()
        for pair in self.confuse_pairs:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ConfigurationError(f"corruption.confuse_pairs entry {pair} is not a pair of distinct classes")
            if seen & set(pair):
                raise ConfigurationError("corruption.confuse_pairs must be disjoint")
            seen |= set(pair)

    def swap_map(self) -> dict[int, int]:
        out = {}
        for a, b in self.confuse_pairs:
            out[a], out[b] = b, a
        return out


@dataclass(frozen=True)
class ScenarioSpec:
    level: str = "client"
    num_clients: int = 5
    target_clients: tuple[int, ...] = (0,)
    corrupted_fraction: float = 0.8
    forget_fraction: float = 0.02
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "target_clients", tuple(int(c) for c in self.target_clients))
        if self.level not in ("client", "data"):
            raise ConfigurationError(f"scenario.level must be 'client' or 'data', got {self.level!r}")
        if self.num_clients < 1:
            raise ConfigurationError("scenario.num_clients must be at least 1")
        if self.level == "client" and not self.target_clients:
            raise ConfigurationError("scenario.target_clients must be non-empty for client-level unlearning")
        for name in ("corrupted_fraction", "forget_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"scenario.{name} must lie in [0, 1]")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("scenario.test_fraction must lie in (0, 1)")


class _Reader:
    def __init__(self, blob: bytes, what: str):
        self.blob, self.what, self.pos = blob, what, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise IngestionError(f"{self.what}: truncated file, needed {n} bytes", offset=self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]


def _downsample(images: np.ndarray, side: int, target: int) -> np.ndarray:
    if target < 1 or side % target:
        raise UsageError(f"downsample_to={target} must divide the image side {side}")
    f = side // target
    n = images.shape[0]
    return images.reshape(n, target, f, target, f).mean(axis=(2, 4))


def load_idx(images_path, labels_path, limit=None, downsample_to=None, num_classes=10) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair into a flattened dataset."""
    img = _Reader(Path(images_path).read_bytes(), "images")
    magic = img.u32()
    if magic != IDX_IMAGES_MAGIC:
        raise IngestionError(f"images: bad magic 0x{magic:08x}", offset=0)
    n, rows, cols = img.u32(), img.u32(), img.u32()
    pixels = np.frombuffer(img.take(n * rows * cols), dtype=np.uint8)

    lab = _Reader(Path(labels_path).read_bytes(), "labels")
    magic = lab.u32()
    if magic != IDX_LABELS_MAGIC:
        raise IngestionError(f"labels: bad magic 0x{magic:08x}", offset=0)
    n_labels = lab.u32()
    if n_labels != n:
        raise IngestionError(f"label count {n_labels} != image count {n}", offset=4)
    labels = np.frombuffer(lab.take(n), dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IngestionError(f"label {labels[bad]} >= num_classes {num_classes}", offset=8 + bad)

    if limit is not None:
        n = min(n, int(limit))
    images = pixels[: n * rows * cols].reshape(n, rows, cols).astype(np.float64) / 255.0
    if downsample_to is not None:
        if rows != cols:
            raise UsageError("downsampling needs square images")
        images = _downsample(images, rows, int(downsample_to))
    return LabeledDataset(images.reshape(n, -1), labels[:n], num_classes)


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray) -> None:
    """Write uint8 arrays ``[n, rows, cols]`` / ``[n]`` in IDX format."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels_u8.tobytes())


def synth_blobs(num_classes: int, per_class: int, d: int, spread: float, seed: int, noise: float = 0.25) -> LabeledDataset:
    """Class ``c`` ~ N(spread * e_c, noise^2 I), clipped to [0, 1].

    Rows are grouped by class; shuffle downstream if order matters.
    """
    if d < num_classes:
        raise ConfigurationError(f"synthetic data needs d >= num_classes ({d} < {num_classes})")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    centers = np.zeros((num_classes, d))
    centers[np.arange(num_classes), np.arange(num_classes)] = spread
    x = centers[labels] + noise * rng.standard_normal((labels.size, d))
    return LabeledDataset(np.clip(x, 0.0, 1.0), labels, num_classes)


def partition_iid(ds: LabeledDataset, num_clients: int, seed: int) -> list[ClientShard]:
    """Random near-equal split; the first ``n % num_clients`` shards get one extra row."""
    if not 1 <= num_clients <= len(ds):
        raise ConfigurationError(f"cannot split {len(ds)} examples across {num_clients} clients")
    perm = rng_for(seed, "partition").permutation(len(ds))
    return [ClientShard(cid, ds.subset(np.sort(idx))) for cid, idx in enumerate(np.array_split(perm, num_clients))]


def _choose(n: int, fraction: float, seed: int) -> np.ndarray:
    m = round_half_up(fraction * n)
    return np.sort(np.random.default_rng(seed).permutation(n)[:m])


def trigger_pixels(side: int, spec: CorruptionSpec) -> np.ndarray:
    """Flat indices of the trigger square inside a ``side x side`` image."""
    s = spec.trigger_size
    if s > side:
        raise UsageError(f"trigger size {s} exceeds image side {side}")
    r0 = 0 if spec.trigger_corner.startswith("top") else side - s
    c0 = 0 if spec.trigger_corner.endswith("left") else side - s
    rows, cols = np.meshgrid(np.arange(r0, r0 + s), np.arange(c0, c0 + s), indexing="ij")
    return (rows * side + cols).reshape(-1)


def image_side(d: int) -> int:
    side = math.isqrt(d)
    if side * side != d:
        raise UsageError(f"image dimension {d} is not a perfect square")
    return side


def stamp_trigger(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    out = np.array(images, dtype=np.float64)
    out[:, trigger_pixels(image_side(out.shape[1]), spec)] = spec.trigger_value
    return out


def apply_backdoor(shard: ClientShard, fraction: float, spec: CorruptionSpec, seed: int) -> ClientShard:
    ds = shard.data
    pix = trigger_pixels(image_side(ds.dim), spec)
    if spec.backdoor_target_class >= ds.num_classes:
        raise ConfigurationError(f"backdoor target class {spec.backdoor_target_class} >= num_classes")
    chosen = _choose(len(ds), fraction, seed)
    if chosen.size == 0:
        return shard
    images, labels, prov = ds.images.copy(), ds.labels.copy(), ds.provenance.copy()
    images[np.ix_(chosen, pix)] = spec.trigger_value
    labels[chosen] = spec.backdoor_target_class
    prov[chosen] = BACKDOORED
    mask = shard.forget_mask.copy()
    mask[chosen] = True
    return ClientShard(shard.client_id, LabeledDataset(images, labels, ds.num_classes, prov), mask)


def apply_confusion(shard: ClientShard, fraction: float, spec: CorruptionSpec, seed: int) -> ClientShard:
    ds = shard.data
    swap = spec.swap_map()
    if swap and max(swap) >= ds.num_classes:
        raise ConfigurationError("confuse_pairs reference a class >= num_classes")
    chosen = _choose(len(ds), fraction, seed)
    if chosen.size == 0:
        return shard
    labels, prov = ds.labels.copy(), ds.provenance.copy()
    labels[chosen] = [swap.get(int(y), int(y)) for y in labels[chosen]]
    prov[chosen] = CONFUSED
    mask = shard.forget_mask.copy()
    mask[chosen] = True
    return ClientShard(shard.client_id, LabeledDataset(ds.images, labels, ds.num_classes, prov), mask)


def stratified_split(ds: LabeledDataset, test_fraction: float, seed: int):
    """Return ``(train_index, test_index)`` with ``test_fraction`` of each class held out."""
    rng = rng_for(seed, "test-split")
    test = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        test.append(rng.permutation(idx)[: round_half_up(test_fraction * idx.size)])
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(len(ds)), test)
    return train, test


def build_scenario(base: LabeledDataset, scenario: ScenarioSpec, corruption: CorruptionSpec):
    """Carve a held-out test set, partition the rest and inject corruption.

    Returns ``(shards, test_set)``.
    """
    train_idx, test_idx = stratified_split(base, scenario.test_fraction, scenario.seed)
    shards = partition_iid(base.subset(train_idx), scenario.num_clients, scenario.seed)
    for cid in scenario.target_clients:
        if not 0 <= cid < scenario.num_clients:
            raise ConfigurationError(f"scenario.target_clients: client {cid} out of range [0, {scenario.num_clients})")

    def corrupt(shard, fraction):
        seed = rng_for(scenario.seed, "corrupt", shard.client_id).integers(2**62)
        if corruption.kind == "backdoor":
            return apply_backdoor(shard, fraction, corruption, seed)
        if corruption.kind == "confuse":
            return apply_confusion(shard, fraction, corruption, seed)
        mask = np.zeros(len(shard), dtype=bool)
        mask[_choose(len(shard), fraction, seed)] = True
        return replace(shard, forget_mask=mask)

    out = []
    for shard in shards:
        if scenario.level == "client":
            if shard.client_id in scenario.target_clients:
                if corruption.kind != "none":
                    shard = corrupt(shard, scenario.corrupted_fraction)
                shard = replace(shard, forget_mask=np.ones(len(shard), dtype=bool))
        else:
            shard = corrupt(shard, scenario.forget_fraction)
        out.append(shard)
    return out, base.subset(test_idx)

