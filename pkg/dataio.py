# dataio.py - IDX dataset loading and hierarchical IID / Dirichlet partitioning
import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    Hierarchy,
    PartitionMode,
    PartitionSpec,
    StreamLabel,
    derive_weights,
    fork_rng,
)

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    """Raised when a dataset cannot be split over the requested topology."""


# === DATASET ===
@dataclass(frozen=True)
class LabeledDataset:
    """Images kept as raw bytes; `features` returns the [0,1]-normalized float64 view."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if len(self.pixels) != len(self.labels):
            raise IdxCountMismatchError(
                f"{len(self.pixels)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise IdxFormatError(
                f"label {int(self.labels.max())} outside {self.num_classes} classes"
            )
        self.pixels.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return int(self.pixels.shape[1])

    def features(self, indices: np.ndarray) -> np.ndarray:
        return self.pixels[indices].astype(np.float64) / 255.0

    def targets(self, indices: np.ndarray) -> np.ndarray:
        return self.labels[indices]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.pixels[indices].copy(), self.labels[indices].copy(), self.num_classes)

    def class_counts(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[indices]
        return np.bincount(labels, minlength=self.num_classes)


def _open(path: Path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, magic: int, dims: int) -> Tuple[Tuple[int, ...], bytes]:
    with _open(path) as f:
        raw = f.read()
    header_len = 4 + 4 * dims
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header shorter than {header_len} bytes")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    shape = struct.unpack(">" + "I" * dims, raw[4:header_len])
    payload = raw[header_len:]
    expected = int(np.prod(shape))
    if len(payload) < expected:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return shape, payload[:expected]


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Load an IDX image/label pair (optionally gzipped)."""
    (count, rows, cols), image_bytes = _read_idx(Path(images_path), IMAGES_MAGIC, 3)
    (label_count,), label_bytes = _read_idx(Path(labels_path), LABELS_MAGIC, 1)
    if count != label_count:
        raise IdxCountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds {label_count} labels"
        )
    pixels = np.frombuffer(image_bytes, dtype=np.uint8).reshape(count, rows * cols).copy()
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    logger.info("loaded %d samples (%dx%d) from %s", count, rows, cols, images_path)
    return LabeledDataset(pixels, labels, num_classes)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray, rows: int = 28, cols: int = 28):
    """Write an IDX pair in the published layout."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(pixels), rows * cols)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, len(pixels), rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def subsample_dataset(dataset: LabeledDataset, size: Optional[int], seed: int) -> LabeledDataset:
    """Uniform subsample without replacement (the --subsample cap)."""
    if size is None or size >= len(dataset):
        return dataset
    rng = fork_rng(seed, StreamLabel("subsample"))
    keep = np.sort(rng.choice(len(dataset), size=size, replace=False))
    return dataset.subset(keep)


# === PARTITIONS ===
@dataclass(frozen=True)
class PartitionedData:
    shards: Tuple[Tuple[np.ndarray, ...], ...]
    spec: PartitionSpec
    dropped: int = 0
    edge_class_counts: Optional[np.ndarray] = None
    class_proportions: Optional[np.ndarray] = None
    hierarchy: Hierarchy = field(init=False)

    def __post_init__(self):
        for edge in self.shards:
            for shard in edge:
                shard.setflags(write=False)
        object.__setattr__(
            self, "hierarchy", derive_weights([[len(s) for s in edge] for edge in self.shards])
        )

    def shard(self, q: int, k: int) -> np.ndarray:
        return self.shards[q][k]

    def edge_indices(self, q: int) -> np.ndarray:
        return np.concatenate(self.shards[q])

    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.edge_indices(q) for q in range(len(self.shards))])

    def provenance(self) -> Dict[str, Any]:
        """JSON-ready description written next to experiment output."""
        record: Dict[str, Any] = {
            "mode": self.spec.mode.value,
            "alpha": self.spec.alpha if self.spec.mode is PartitionMode.DIRICHLET else None,
            "rng_seed": self.spec.rng_seed,
            "shard_sizes": [list(sizes) for sizes in self.hierarchy.shard_sizes],
            "dropped_samples": int(self.dropped),
        }
        if self.edge_class_counts is not None:
            record["edge_class_counts"] = self.edge_class_counts.tolist()
        if self.class_proportions is not None:
            record["class_proportions"] = self.class_proportions.tolist()
        return record


def _split_equal(pool: np.ndarray, parts: int, shard_size: Optional[int] = None) -> Tuple[List[np.ndarray], int]:
    size = len(pool) // parts if shard_size is None else shard_size
    used = size * parts
    if size < 1 or used > len(pool):
        raise PartitionError(f"cannot split {len(pool)} samples into {parts} shards of {size}")
    return [pool[i * size:(i + 1) * size].copy() for i in range(parts)], len(pool) - used


def partition_iid(
    dataset: LabeledDataset,
    devices_per_edge: Sequence[int],
    rng: np.random.Generator,
    spec: Optional[PartitionSpec] = None,
    shard_size: Optional[int] = None,
) -> PartitionedData:
    """Global shuffle, then equal contiguous shards per device."""
    num_devices = int(sum(devices_per_edge))
    if len(dataset) < num_devices:
        raise PartitionError(f"{len(dataset)} samples cannot feed {num_devices} devices")
    order = rng.permutation(len(dataset))
    flat, dropped = _split_equal(order, num_devices, shard_size)

    shards, cursor = [], 0
    for m in devices_per_edge:
        shards.append(tuple(flat[cursor:cursor + m]))
        cursor += m
    spec = spec or PartitionSpec(mode=PartitionMode.IID)
    counts = np.stack([dataset.class_counts(np.concatenate(edge)) for edge in shards])
    return PartitionedData(tuple(shards), spec, dropped, edge_class_counts=counts)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to total, closest to proportions * total."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # Stable order keeps ties deterministic.
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet_draw(dataset, devices_per_edge, alpha, rng):
    num_edges = len(devices_per_edge)
    proportions = rng.dirichlet(np.full(num_edges, alpha), size=dataset.num_classes)
    pools: List[List[np.ndarray]] = [[] for _ in range(num_edges)]
    for m in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == m)
        members = members[rng.permutation(len(members))]
        counts = largest_remainder(proportions[m], len(members))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for q in range(num_edges):
            pools[q].append(members[bounds[q]:bounds[q + 1]])
    return proportions, [np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in pools]


def partition_dirichlet(
    dataset: LabeledDataset,
    devices_per_edge: Sequence[int],
    alpha: float,
    rng: np.random.Generator,
    spec: Optional[PartitionSpec] = None,
    max_retries: int = 20,
) -> PartitionedData:
    """Dirichlet label skew across edges, IID equal shards within each edge."""
    if len(dataset) == 0:
        raise PartitionError("cannot partition an empty dataset")
    if not devices_per_edge:
        raise PartitionError("need at least one edge")
    spec = spec or PartitionSpec(mode=PartitionMode.DIRICHLET, alpha=alpha)

    for attempt in range(max_retries + 1):
        proportions, pools = _dirichlet_draw(dataset, devices_per_edge, alpha, rng)
        if all(len(pool) >= m for pool, m in zip(pools, devices_per_edge)):
            break
        logger.warning("dirichlet draw %d left an edge short of samples; redrawing", attempt)
    else:
        raise PartitionError(
            f"dirichlet(alpha={alpha}) left an edge without enough samples after {max_retries} retries"
        )

    shards, dropped = [], 0
    for pool, m in zip(pools, devices_per_edge):
        pool = pool[rng.permutation(len(pool))]
        edge_shards, rest = _split_equal(pool, m)
        shards.append(tuple(edge_shards))
        dropped += rest
    counts = np.stack([dataset.class_counts(np.concatenate(edge)) for edge in shards])
    return PartitionedData(tuple(shards), spec, dropped, edge_class_counts=counts, class_proportions=proportions)


def make_partition(dataset: LabeledDataset, devices_per_edge: Sequence[int], spec: PartitionSpec, seed: int) -> PartitionedData:
    """Dispatch on the spec mode; the run seed and spec.rng_seed together pick the stream."""
    rng = fork_rng(seed, StreamLabel(f"partition-{spec.rng_seed}"))
    if spec.mode is PartitionMode.DIRICHLET:
        return partition_dirichlet(dataset, devices_per_edge, spec.alpha, rng, spec, spec.max_retries)
    return partition_iid(dataset, devices_per_edge, rng, spec)


def sample_batch(shard: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """B indices drawn uniformly with replacement from the shard."""
    return shard[rng.integers(0, len(shard), size=batch_size)]
