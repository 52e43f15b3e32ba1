"""Datasets, class splits, the EGDS file format and the N-way K-shot episode sampler."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EGDS"
FORMAT_VERSION = 1
VARIANT_TAGS = {"gaussian_vectors": 0, "procedural_images": 1}
VARIANT_NAMES = {v: k for k, v in VARIANT_TAGS.items()}
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class SamplerError(ValueError):
    """The requested episode cannot be drawn from the dataset split."""


@dataclass(frozen=True)
class SyntheticSpec:
    variant: str = "gaussian_vectors"
    dim: int = 16
    image_size: int = 16
    classes: int = 56
    per_class: int = 60
    sigma_w: float = 1.0
    sigma_b: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANT_TAGS:
            raise ValueError(f"unknown synthetic variant {self.variant!r}")
        if self.sigma_w <= 0 or self.sigma_b <= 0:
            raise ValueError("sigma_w and sigma_b must be positive")
        if self.classes < 1 or self.per_class < 1 or self.dim < 1 or self.image_size < 4:
            raise ValueError("classes, per_class, dim must be >= 1 and image_size >= 4")

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.variant == "gaussian_vectors":
            return (self.dim,)
        return (1, self.image_size, self.image_size)


def default_split_counts(num_classes: int) -> tuple[int, int, int]:
    """64/16/20 proportions, every split non-empty when possible."""
    n_test = max(1, round(0.20 * num_classes))
    n_val = max(1, round(0.16 * num_classes)) if num_classes >= 3 else 0
    return num_classes - n_val - n_test, n_val, n_test


@dataclass
class Dataset:
    x: np.ndarray                       # (classes * per_class, *input_shape), float32
    y: np.ndarray                       # class id per sample
    variant: str
    num_classes: int
    per_class: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.splits:
            self.set_splits(*default_split_counts(self.num_classes))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def class_indices(self, c: int) -> np.ndarray:
        return np.arange(c * self.per_class, (c + 1) * self.per_class)

    @property
    def class_index(self) -> dict[int, np.ndarray]:
        return {c: self.class_indices(c) for c in range(self.num_classes)}

    def set_splits(self, n_train: int, n_val: int, n_test: int) -> "Dataset":
        """Contiguous class-id ranges: train first, then val, then test."""
        if min(n_train, n_val, n_test) < 0 or n_train + n_val + n_test > self.num_classes:
            raise ValueError(f"split {n_train}/{n_val}/{n_test} does not fit {self.num_classes} classes")
        ids = np.arange(self.num_classes)
        self.splits = {
            "train": ids[:n_train],
            "val": ids[n_train:n_train + n_val],
            "test": ids[n_train + n_val:n_train + n_val + n_test],
        }
        return self

    def split_counts(self) -> tuple[int, int, int]:
        return tuple(len(self.splits[s]) for s in SPLITS)

    def equals(self, other: "Dataset") -> bool:
        return (self.variant == other.variant and self.num_classes == other.num_classes
                and self.per_class == other.per_class and np.array_equal(self.x, other.x)
                and np.array_equal(self.y, other.y))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian class clusters, or smooth per-class 16x16 templates plus pixel noise."""
    rng = np.random.default_rng(spec.seed)
    C, S = spec.classes, spec.per_class
    if spec.variant == "gaussian_vectors":
        centers = rng.normal(0.0, spec.sigma_b, size=(C, spec.dim))
        noise = rng.normal(0.0, spec.sigma_w, size=(C, S, spec.dim))
        x = centers[:, None, :] + noise
    else:
        size = spec.image_size
        coarse = rng.normal(0.0, spec.sigma_b, size=(C, 4, 4))
        # bilinear upsampling of a 4x4 grid gives each class a smooth template
        grid = np.linspace(0.0, 3.0, size)
        i0 = np.minimum(np.floor(grid).astype(int), 2)
        t = grid - i0
        rows = coarse[:, i0, :] * (1 - t)[None, :, None] + coarse[:, i0 + 1, :] * t[None, :, None]
        templates = rows[:, :, i0] * (1 - t)[None, None, :] + rows[:, :, i0 + 1] * t[None, None, :]
        noise = rng.normal(0.0, spec.sigma_w, size=(C, S, size, size))
        x = (templates[:, None] + noise)[:, :, None, :, :]
    x = x.reshape((C * S,) + spec.input_shape).astype(np.float32)
    y = np.repeat(np.arange(C), S)
    return Dataset(x, y, spec.variant, C, S)


# -- file format -------------------------------------------------------------------

_HEADER = struct.Struct("<4sHBIIB")


def save_dataset(dataset: Dataset, path) -> None:
    shape = dataset.input_shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, VARIANT_TAGS[dataset.variant],
                          dataset.num_classes, dataset.per_class, len(shape))
    header += struct.pack(f"<{len(shape)}I", *shape)
    payload = np.ascontiguousarray(dataset.x, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_dataset(path, split_counts: tuple[int, int, int] | None = None) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("file shorter than the fixed header", len(blob))
    magic, version, tag, n_classes, per_class, ndim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}", 4)
    if tag not in VARIANT_NAMES:
        raise DatasetFormatError(f"unknown variant tag {tag}", 6)
    if n_classes == 0 or per_class == 0 or ndim == 0:
        raise DatasetFormatError("class count, per-class count and rank must be positive", 7)
    off = _HEADER.size
    if len(blob) < off + 4 * ndim:
        raise DatasetFormatError("truncated input shape", len(blob))
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    if any(s == 0 for s in shape):
        raise DatasetFormatError(f"zero extent in input shape {shape}", _HEADER.size)
    expected = n_classes * per_class * int(np.prod(shape)) * 4
    actual = len(blob) - off
    if actual != expected:
        raise DatasetFormatError(
            f"payload is {actual} bytes but the header ({n_classes} classes x {per_class} samples "
            f"x {shape}) implies {expected}", off + min(actual, expected))
    x = np.frombuffer(blob, dtype="<f4", offset=off).astype(np.float32).reshape((n_classes * per_class,) + shape)
    ds = Dataset(x, np.repeat(np.arange(n_classes), per_class), VARIANT_NAMES[tag], n_classes, per_class)
    if split_counts is not None:
        ds.set_splits(*split_counts)
    return ds


# -- episodes --------------------------------------------------------------------

@dataclass
class Episode:
    """One N-way K-shot task. Supports and queries are class-major."""

    support_x: np.ndarray
    support_y: np.ndarray               # episode-local labels 0..N-1
    support_labeled: np.ndarray         # bool per support
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    n_shot: int
    n_query: int                        # queries per class
    classes: np.ndarray                 # dataset class id for each local label
    seed: int | None = None

    @property
    def num_support(self) -> int:
        return len(self.support_y)

    @property
    def num_queries(self) -> int:
        return len(self.query_y)

    @property
    def num_nodes(self) -> int:
        return self.num_support + self.num_queries

    def all_labels(self) -> np.ndarray:
        return np.concatenate([self.support_y, self.query_y])

    def graph_arrays(self, query_subset=None):
        """Inputs, true labels, labeled mask and query mask for a graph over
        every support plus the chosen queries (all by default)."""
        qs = np.arange(self.num_queries) if query_subset is None else np.asarray(query_subset)
        inputs = np.concatenate([self.support_x, self.query_x[qs]])
        labels = np.concatenate([self.support_y, self.query_y[qs]])
        labeled = np.concatenate([self.support_labeled, np.zeros(len(qs), dtype=bool)])
        is_query = np.concatenate([np.zeros(self.num_support, dtype=bool), np.ones(len(qs), dtype=bool)])
        return inputs, labels, labeled, is_query

    def labeled_only(self) -> "Episode":
        """Drop unlabeled supports from the task entirely."""
        keep = self.support_labeled
        per_class = np.bincount(self.support_y[keep], minlength=self.n_way)
        return dataclasses.replace(
            self, support_x=self.support_x[keep], support_y=self.support_y[keep],
            support_labeled=np.ones(int(keep.sum()), dtype=bool), n_shot=int(per_class.min()))

    def permuted(self, support_perm=None, query_perm=None) -> "Episode":
        sp = np.arange(self.num_support) if support_perm is None else np.asarray(support_perm)
        qp = np.arange(self.num_queries) if query_perm is None else np.asarray(query_perm)
        return dataclasses.replace(
            self, support_x=self.support_x[sp], support_y=self.support_y[sp],
            support_labeled=self.support_labeled[sp], query_x=self.query_x[qp], query_y=self.query_y[qp])


def labeled_per_class(n_shot: int, labeled_ratio: float) -> int:
    if not 0 < labeled_ratio <= 1:
        raise SamplerError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    count = labeled_ratio * n_shot
    rounded = int(round(count))
    if rounded < 1 or abs(count - rounded) > 1e-9:
        raise SamplerError(f"labeled_ratio {labeled_ratio} x {n_shot} shots is not a positive integer")
    return rounded


def sample_episode(dataset: Dataset, n_way: int, n_shot: int, n_query: int,
                   labeled_ratio: float = 1.0, rng=None, split: str = "train",
                   seed: int | None = None) -> Episode:
    """Draw N classes uniformly from ``split``, then K supports and T_q queries
    per class without replacement. ``labeled_ratio * K`` supports per class
    are labeled."""
    if rng is None:
        rng = np.random.default_rng(seed)
    n_labeled = labeled_per_class(n_shot, labeled_ratio)
    pool = dataset.splits.get(split)
    if pool is None:
        raise SamplerError(f"unknown split {split!r}")
    if n_way < 1 or n_shot < 1 or n_query < 0:
        raise SamplerError("need n_way >= 1, n_shot >= 1, n_query >= 0")
    if len(pool) < n_way:
        raise SamplerError(f"split {split!r} has {len(pool)} classes, episode needs {n_way}")
    if dataset.per_class < n_shot + n_query:
        raise SamplerError(f"classes have {dataset.per_class} samples, episode needs {n_shot + n_query}")

    classes = rng.choice(pool, size=n_way, replace=False)
    sup_idx, qry_idx, labeled = [], [], []
    for c in classes:
        picked = rng.choice(dataset.class_indices(int(c)), size=n_shot + n_query, replace=False)
        sup_idx.append(picked[:n_shot])
        qry_idx.append(picked[n_shot:])
        mask = np.zeros(n_shot, dtype=bool)
        mask[rng.choice(n_shot, size=n_labeled, replace=False)] = True
        labeled.append(mask)
    sup_idx = np.concatenate(sup_idx)
    qry_idx = np.concatenate(qry_idx) if n_query else np.zeros(0, dtype=int)
    return Episode(
        support_x=dataset.x[sup_idx],
        support_y=np.repeat(np.arange(n_way), n_shot),
        support_labeled=np.concatenate(labeled),
        query_x=dataset.x[qry_idx],
        query_y=np.repeat(np.arange(n_way), n_query),
        n_way=n_way, n_shot=n_shot, n_query=n_query,
        classes=np.asarray(classes), seed=seed,
    )
