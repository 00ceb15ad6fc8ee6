"""Dataset loading, synthetic generation, non-IID partitioning, pseudo-data.

Datasets are immutable value objects; every operation here is deterministic
given its inputs and seed.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .seeding import seed_stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n_samples, input_dim), values in [0, 1]
    labels: np.ndarray    # (n_samples,) int class indices
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels length must equal the number of samples")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[indices].copy(), self.labels[indices].copy(), self.num_classes)


@dataclass
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("need at least one client")
        if self.alpha <= 0:
            raise ValueError("dirichlet concentration alpha must be positive")


@dataclass
class PseudoDataset:
    """Unlabeled samples, each the mean of m_per_sample real samples."""

    features: np.ndarray
    m_per_sample: int
    k_per_client: int

    def __len__(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# IDX ingestion

def _read_all(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        rest = f.read()
    raw = head + rest
    if head == GZIP_MAGIC:
        return gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label file pair (optionally gzip-compressed).

    Image file layout (big endian):
        i32  magic 0x00000803
        i32  item count
        i32  rows
        i32  cols
        u8[] pixels, row-major
    Label file layout:
        i32  magic 0x00000801
        i32  item count
        u8[] labels
    Pixels are scaled by 1/255.
    """
    img = _read_all(images_path)
    if len(img) < 16:
        raise DataError(f"{images_path}: truncated header at offset {len(img)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"{images_path}: bad magic 0x{magic:08x} at offset 0")
    expected = 16 + count * rows * cols
    if len(img) < expected:
        raise DataError(f"{images_path}: truncated data at offset {len(img)} (expected {expected} bytes)")

    lab = _read_all(labels_path)
    if len(lab) < 8:
        raise DataError(f"{labels_path}: truncated header at offset {len(lab)}")
    lmagic, lcount = struct.unpack_from(">II", lab, 0)
    if lmagic != IDX_LABEL_MAGIC:
        raise DataError(f"{labels_path}: bad magic 0x{lmagic:08x} at offset 0")
    if lcount != count:
        raise DataError(f"label count {lcount} does not match image count {count}")
    if len(lab) < 8 + lcount:
        raise DataError(f"{labels_path}: truncated data at offset {len(lab)} (expected {8 + lcount} bytes)")

    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=16)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if count else 0
    return LabeledDataset(features, labels, num_classes)


def write_idx(ds: LabeledDataset, images_path, labels_path, side: int | None = None) -> None:
    """Write a dataset back out as an IDX pair (gzipped when paths end in .gz)."""
    n = len(ds)
    if side is None:
        side = int(round(math.sqrt(ds.input_dim)))
    if side * side != ds.input_dim:
        raise ValueError("features do not reshape to square images")
    pixels = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, side, side) + pixels.tobytes()
    lab = struct.pack(">II", IDX_LABEL_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    for path, payload in ((images_path, img), (labels_path, lab)):
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "wb") as f:
            f.write(payload)


# ---------------------------------------------------------------------------
# synthetic data

def synthetic_blobs(
    n_per_class: int, num_classes: int, input_dim: int, spread: float, seed: int
) -> LabeledDataset:
    """Gaussian class clusters with distinct means, min-max scaled to [0, 1]."""
    if n_per_class < 1 or num_classes < 1 or input_dim < 1:
        raise ValueError("counts must be positive")
    rng = seed_stream(seed, "synthetic-blobs")
    means = rng.normal(0.0, 1.0, size=(num_classes, input_dim))
    features = np.repeat(means, n_per_class, axis=0)
    features = features + spread * rng.normal(0.0, 1.0, size=features.shape)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    order = rng.permutation(features.shape[0])
    features, labels = features[order], labels[order]
    lo, hi = features.min(), features.max()
    if hi > lo:
        features = (features - lo) / (hi - lo)
    else:
        features = np.zeros_like(features)
    return LabeledDataset(features, labels, num_classes)


# ---------------------------------------------------------------------------
# rotation

def _bilinear_sample(images: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample (n, h, w) images at fractional (rows, cols); out of bounds reads 0."""
    n, h, w = images.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros((n,) + rows.shape)
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = images[:, np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)]
        out += wt * np.where(valid, vals, 0.0)
    return out


def rotate_images(ds: LabeledDataset, angle_degrees: float) -> LabeledDataset:
    """Rotate square images about their center; positive angles turn the
    content counter-clockwise (row 0 displayed at the top). Bilinear
    interpolation, zero fill outside the frame; labels are unchanged."""
    side = int(round(math.sqrt(ds.input_dim)))
    if side * side != ds.input_dim:
        raise ValueError(f"feature length {ds.input_dim} is not a square image")
    images = ds.features.reshape(len(ds), side, side)
    center = (side - 1) / 2.0
    rad = math.radians(angle_degrees)
    cos_a, sin_a = math.cos(rad), math.sin(rad)
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    x = cc - center          # +x to the right
    y = center - rr          # +y upward
    src_x = cos_a * x + sin_a * y
    src_y = -sin_a * x + cos_a * y
    src_rows = center - src_y
    src_cols = center + src_x
    rotated = _bilinear_sample(images, src_rows, src_cols)
    rotated = np.clip(rotated, 0.0, 1.0)
    return LabeledDataset(rotated.reshape(len(ds), ds.input_dim), ds.labels.copy(), ds.num_classes)


# ---------------------------------------------------------------------------
# non-IID partitioning

def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Round proportions*total to integer counts whose sum is exactly total."""
    raw = proportions * total
    base = np.floor(raw).astype(np.int64)
    remainder = total - int(base.sum())
    if remainder > 0:
        frac = raw - base
        order = np.lexsort((np.arange(frac.size), -frac))
        base[order[:remainder]] += 1
    return base


def _allocate(ds: LabeledDataset, spec: PartitionSpec, rng: np.random.Generator) -> list[list[np.ndarray]]:
    """One Dirichlet allocation attempt: per-class index chunks per client."""
    per_client: list[list[np.ndarray]] = [[] for _ in range(spec.num_clients)]
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size == 0:
            continue
        proportions = rng.dirichlet(np.full(spec.num_clients, spec.alpha))
        counts = _largest_remainder_counts(proportions, idx.size)
        idx = rng.permutation(idx)
        start = 0
        for i, cnt in enumerate(counts):
            if cnt:
                per_client[i].append(idx[start : start + cnt])
            start += cnt
    return per_client


def lda_partition(ds: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Split a dataset over clients with per-class Dirichlet(alpha) allocation.

    Small alpha concentrates each class on few clients (high skew); large
    alpha approaches a uniform split. Every sample is assigned exactly once,
    and no client is left empty: the allocation is redrawn up to 100 times,
    after which single samples are moved from the largest client.
    """
    if spec.num_clients > len(ds):
        raise DataError(
            f"cannot split {len(ds)} samples across {spec.num_clients} clients"
        )
    rng = seed_stream(spec.seed, "lda-partition")
    chunks = _allocate(ds, spec, rng)
    for _ in range(100):
        if all(chunks_i for chunks_i in chunks):
            break
        chunks = _allocate(ds, spec, rng)
    assignments = [
        np.concatenate(c) if c else np.empty(0, dtype=np.int64) for c in chunks
    ]
    # Fallback: donate one sample at a time from the currently largest client.
    for i in range(spec.num_clients):
        while assignments[i].size == 0:
            donor = max(range(spec.num_clients), key=lambda j: (assignments[j].size, -j))
            if assignments[donor].size <= 1:
                raise DataError("cannot make every client non-empty")
            assignments[i] = assignments[donor][-1:]
            assignments[donor] = assignments[donor][:-1]
    return [ds.take(a) for a in assignments]


def split_train_test(
    ds: LabeledDataset, test_fraction: float, rng: np.random.Generator
) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint shuffled train/test split; both sides are always non-empty."""
    n = len(ds)
    if n < 2:
        raise DataError(f"need at least 2 samples to split, got {n}")
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    order = rng.permutation(n)
    return ds.take(order[n_test:]), ds.take(order[:n_test])


# ---------------------------------------------------------------------------
# pseudo-data

def build_pseudo_data(
    local_datasets: list[LabeledDataset], k_per_client: int, m_per_sample: int, seed: int
) -> PseudoDataset:
    """Build the shared unlabeled pool: per client, k samples, each the mean
    of m distinct local samples. Labels are discarded."""
    if m_per_sample < 2:
        raise ValueError("each pseudo sample must average at least 2 samples")
    if k_per_client < 1:
        raise ValueError("need at least one pseudo sample per client")
    for i, ds in enumerate(local_datasets):
        if len(ds) < m_per_sample:
            raise ValueError(
                f"client {i} has {len(ds)} samples, fewer than m={m_per_sample}"
            )
    rng = seed_stream(seed, "pseudo-build")
    rows = []
    for ds in local_datasets:
        for _ in range(k_per_client):
            picks = rng.choice(len(ds), size=m_per_sample, replace=False)
            rows.append(ds.features[picks].mean(axis=0))
    return PseudoDataset(np.asarray(rows), m_per_sample, k_per_client)


def sample_pseudo_batch(
    pd: PseudoDataset, batch_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform sample without replacement from the pseudo pool."""
    if batch_size > len(pd):
        raise ValueError(f"batch size {batch_size} exceeds pseudo pool size {len(pd)}")
    idx = rng.choice(len(pd), size=batch_size, replace=False)
    return pd.features[idx]


class BatchIterator:
    """Cycles through sample indices in shuffled mini-batches, reshuffling
    each epoch. The final batch of an epoch may be smaller, never empty."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1 or batch_size < 1:
            raise ValueError("need a non-empty dataset and positive batch size")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        if self._pos >= self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += batch.size
        return batch
