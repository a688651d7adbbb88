"""Dataset ingestion, majority/minority partitioning and norm-bound handling."""

from __future__ import annotations

import csv
import gzip
import io
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from ._rng import stream
from .diffusion import SampleBatch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

MNIST_CLUSTERS = ((0, 1, 2, 3, 4), (5, 6, 7, 8, 9))
CIFAR_CLUSTERS = ((0, 1, 8, 9), (2, 3, 4, 5, 6, 7))
CIFAR_NAMES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    if len(raw) < 4:
        raise ValueError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ValueError(f"IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise ValueError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    size = int(np.prod(dims))
    payload = raw[4 + 4 * ndim:]
    if len(payload) != size:
        raise ValueError(f"IDX payload has {len(payload)} bytes, header declares {size}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def scale_pixels(u8, value_range="unit"):
    x = np.asarray(u8, dtype=np.float64) / 255.0
    if value_range == "symmetric":
        return 2.0 * x - 1.0
    if value_range != "unit":
        raise ValueError("value_range must be 'unit' or 'symmetric'")
    return x


def load_mnist_idx(images_path, labels_path, value_range="unit") -> SampleBatch:
    images = parse_idx(_read(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read(labels_path), IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise ValueError("IDX image file must be 3-dimensional")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, h, w = images.shape
    return SampleBatch(scale_pixels(images.reshape(n, -1), value_range), (1, h, w), labels.astype(np.int64))


def load_cifar10_bin(paths, value_range="unit") -> SampleBatch:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        raw = _read(path)
        if len(raw) % CIFAR_RECORD:
            raise ValueError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    return SampleBatch(scale_pixels(records[:, 1:], value_range), (3, 32, 32), records[:, 0].astype(np.int64))


def load_digits_8x8(value_range="unit") -> SampleBatch:
    """scikit-learn's bundled 8x8 handwritten digits (pixel values 0..16)."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    x = bunch.data / 16.0
    if value_range == "symmetric":
        x = 2.0 * x - 1.0
    return SampleBatch(x, (1, 8, 8), bunch.target.astype(np.int64))


def downsample(batch: SampleBatch, factor: int) -> SampleBatch:
    """Average-pool square images by ``factor``."""
    c, h, w = batch.shape
    if h % factor or w % factor:
        raise ValueError("image size must be divisible by factor")
    imgs = batch.images().reshape(len(batch), c, h // factor, factor, w // factor, factor)
    pooled = imgs.mean(axis=(3, 5))
    return SampleBatch(pooled.reshape(len(batch), -1), (c, h // factor, w // factor), batch.labels, batch.client_id)


# -- partitioning ------------------------------------------------------------


@dataclass
class ClientSplit:
    majority: int
    n_majority: int
    minority: int
    n_minority: int


@dataclass
class PartitionSpec:
    clusters: Sequence[Sequence[int]]
    clients: Sequence[ClientSplit]
    seed: int = 0

    def __post_init__(self):
        self.clusters = [tuple(int(c) for c in cl) for cl in self.clusters]
        seen = set()
        for cl in self.clusters:
            if seen & set(cl):
                raise ValueError("clusters must be disjoint")
            seen |= set(cl)
        self.clients = [c if isinstance(c, ClientSplit) else ClientSplit(*c) for c in self.clients]
        for c in self.clients:
            if c.n_majority < 0 or c.n_minority < 0:
                raise ValueError("counts must be nonnegative")
            if c.n_majority + c.n_minority == 0:
                raise ValueError("a client would receive no samples")
            for k in (c.majority, c.minority):
                if not 0 <= k < len(self.clusters):
                    raise ValueError(f"unknown cluster id {k}")

    @classmethod
    def majority_minority(cls, clusters, n_majority, n_minority, seed=0):
        """Two clients with the majority/minority clusters swapped."""
        return cls(clusters, [ClientSplit(0, n_majority, 1, n_minority), ClientSplit(1, n_majority, 0, n_minority)], seed)


def partition_indices(labels, spec: PartitionSpec) -> List[np.ndarray]:
    """Disjoint per-client index arrays, sampled without replacement."""
    labels = np.asarray(labels)
    rng = stream(spec.seed, "partition")
    pools = [rng.permutation(np.flatnonzero(np.isin(labels, cl))) for cl in spec.clusters]
    taken = [0] * len(pools)

    def take(cluster, n):
        start = taken[cluster]
        if start + n > pools[cluster].size:
            raise ValueError(
                f"cluster {cluster} has {pools[cluster].size} samples, {start + n} requested across clients"
            )
        taken[cluster] = start + n
        return pools[cluster][start:start + n]

    out = []
    for c in spec.clients:
        idx = np.concatenate([take(c.majority, c.n_majority), take(c.minority, c.n_minority)])
        out.append(np.sort(idx))
    return out


def partition(dataset: SampleBatch, spec: PartitionSpec) -> List[SampleBatch]:
    if dataset.labels is None:
        raise ValueError("partitioning needs labels")
    out = []
    for cid, idx in enumerate(partition_indices(dataset.labels, spec)):
        part = dataset.subset(idx)
        part.client_id = cid
        out.append(part)
    return out


def held_out_indices(n, parts) -> np.ndarray:
    used = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
    return np.setdiff1d(np.arange(n), used)


def manifest_csv(labels, parts) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("client_id", "source_index", "label"))
    for cid, idx in enumerate(parts):
        for i in idx:
            writer.writerow((cid, int(i), int(labels[i])))
    return out.getvalue()


# -- norm bounds -------------------------------------------------------------


@dataclass
class NormPolicy:
    mode: str = "report"
    l2_bound: float = None
    coord_bound: float = None

    def __post_init__(self):
        if self.mode not in ("report", "clip"):
            raise ValueError("mode must be 'report' or 'clip'")
        if self.mode == "clip":
            if self.l2_bound is None and self.coord_bound is None:
                raise ValueError("clip mode needs l2_bound and/or coord_bound")
            for b in (self.l2_bound, self.coord_bound):
                if b is not None and b <= 0:
                    raise ValueError("clip bounds must be positive")


@dataclass
class NormReport:
    max_l2: float
    max_abs: float
    clipped: int = 0


def apply_norm_policy(batch: SampleBatch, policy: NormPolicy) -> Tuple[SampleBatch, NormReport]:
    """Measure (``report``) or enforce (``clip``) the bounds the accountant assumes."""
    x = batch.data
    touched = np.zeros(len(batch), dtype=bool)
    if policy.mode == "clip":
        x = x.copy()
        if policy.coord_bound is not None:
            touched |= np.any(np.abs(x) > policy.coord_bound, axis=1)
            np.clip(x, -policy.coord_bound, policy.coord_bound, out=x)
        if policy.l2_bound is not None:
            norms = np.linalg.norm(x, axis=1)
            over = norms > policy.l2_bound
            touched |= over
            x[over] *= (policy.l2_bound / norms[over])[:, None]
    else:
        warnings.warn(
            "observed norms are data-dependent; the privacy guarantee needs a bound that holds for every input",
            stacklevel=2,
        )
    report = NormReport(float(np.linalg.norm(x, axis=1).max()), float(np.abs(x).max()), int(touched.sum()))
    return batch.with_data(x), report
