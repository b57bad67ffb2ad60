"""Synthetic GMM generation, IDX ingestion, splits, and the dataset cache.

Datasets are immutable array-backed containers (float64 features, int64
labels). IDX parsing is bit-exact big-endian; pixel values are scaled to
[0, 1] and then normalized with mean 0.5 / std 0.5. The cache file reuses
the checkpoint container idiom with magic "CRMD".
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .nn import Example
from .rng import standard_normal, substream

CACHE_MAGIC = b"CRMD"
CACHE_VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be (N, d), got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError(f"{feats.shape[0]} feature rows vs "
                             f"{labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def example(self, i: int) -> Example:
        return Example(self.features[i], int(self.labels[i]))

    @property
    def examples(self) -> list[Example]:
        return [self.example(i) for i in range(len(self))]

    def subset(self, indices, name: str = "") -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       name or self.name)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features, self.labels


@dataclass(frozen=True)
class GmmSpec:
    """Per-class diagonal Gaussians mixed by weight."""

    means: np.ndarray          # (K, d)
    covariances: np.ndarray    # (K, d) diagonal entries
    weights: np.ndarray        # (K,)
    num_samples: int
    seed: int = 0

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=np.float64)
        covs = np.asarray(self.covariances, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.ndim != 2:
            raise ValueError(f"means must be (K, d), got shape {means.shape}")
        if covs.shape != means.shape:
            raise ValueError(f"covariances shape {covs.shape} must match "
                             f"means shape {means.shape}")
        if weights.shape != (means.shape[0],):
            raise ValueError(f"need one weight per class, got {weights.shape}")
        if np.any(weights < 0.0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {weights.sum()}")
        if np.any(covs <= 0.0):
            raise ValueError("covariance entries must be > 0")
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be >= 1, got {self.num_samples}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "weights", weights)

    @property
    def num_classes(self) -> int:
        return int(self.means.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.means.shape[1])


def default_gmm_spec(num_samples: int = 10_000, seed: int = 0) -> GmmSpec:
    """Three overlapping unit-covariance classes in the plane."""
    return GmmSpec(
        means=np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]),
        covariances=np.ones((3, 2)),
        weights=np.full(3, 1.0 / 3.0),
        num_samples=num_samples,
        seed=seed,
    )


def sample_gmm(spec: GmmSpec, n: int,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n i.i.d. samples from the mixture using the given stream."""
    cum = np.cumsum(spec.weights)
    cum[-1] = 1.0  # guard the last bin against cumsum roundoff
    labels = np.searchsorted(cum, rng.random(n), side="right").astype(np.int64)
    z = standard_normal(rng, (n, spec.feature_dim))
    feats = spec.means[labels] + np.sqrt(spec.covariances[labels]) * z
    return feats, labels


def gen_gmm(spec: GmmSpec) -> Dataset:
    """Seeded i.i.d. dataset from the mixture spec."""
    rng = substream(spec.seed, "gmm")
    feats, labels = sample_gmm(spec, spec.num_samples, rng)
    return Dataset(feats, labels, spec.num_classes, name="gmm")


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a normalized flat dataset."""
    img_blob = _read_bytes(images_path)
    lbl_blob = _read_bytes(labels_path)

    if len(img_blob) < 16:
        raise DataFormatError(f"{images_path}: truncated image header")
    magic, count, rows, cols = struct.unpack_from(">IIII", img_blob)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad magic 0x{magic:08x}, "
                              f"expected 0x{IDX_IMAGES_MAGIC:08x}")
    pixels = count * rows * cols
    if len(img_blob) != 16 + pixels:
        raise DataFormatError(f"{images_path}: expected {pixels} pixel bytes, "
                              f"found {len(img_blob) - 16}")

    if len(lbl_blob) < 8:
        raise DataFormatError(f"{labels_path}: truncated label header")
    lmagic, lcount = struct.unpack_from(">II", lbl_blob)
    if lmagic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad magic 0x{lmagic:08x}, "
                              f"expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(lbl_blob) != 8 + lcount:
        raise DataFormatError(f"{labels_path}: expected {lcount} label bytes, "
                              f"found {len(lbl_blob) - 8}")
    if count != lcount:
        raise DataFormatError(f"{count} images vs {lcount} labels")

    raw = np.frombuffer(img_blob, dtype=np.uint8, offset=16)
    feats = raw.reshape(count, rows * cols).astype(np.float64)
    feats = (feats / 255.0 - 0.5) / 0.5
    labels = np.frombuffer(lbl_blob, dtype=np.uint8, offset=8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(feats, labels, num_classes, name="idx")


def split_dataset(ds: Dataset, sizes: tuple[int, int, int],
                  seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint uniformly random (train, cal, test) subsets of exact sizes."""
    n_train, n_cal, n_test = (int(s) for s in sizes)
    if min(n_train, n_cal, n_test) < 0:
        raise ValueError(f"split sizes must be >= 0, got {sizes}")
    total = n_train + n_cal + n_test
    if total > len(ds):
        raise ValueError(f"requested {total} examples from a dataset of {len(ds)}")
    perm = substream(seed, "data/split").permutation(len(ds))
    train = ds.subset(perm[:n_train])
    cal = ds.subset(perm[n_train:n_train + n_cal])
    test = ds.subset(perm[n_train + n_cal:total])
    return train, cal, test


def save_dataset(ds: Dataset, path) -> None:
    """Dataset cache file: CRMD container, little-endian."""
    name = ds.name.encode("utf-8")
    blob = bytearray()
    blob += struct.pack("<4sII", CACHE_MAGIC, CACHE_VERSION, len(name))
    blob += name
    blob += struct.pack("<IIQ", ds.num_classes, ds.feature_dim, len(ds))
    blob += ds.labels.astype("<u4").tobytes()
    blob += ds.features.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sII")
    if len(blob) < head:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, name_len = struct.unpack_from("<4sII", blob)
    if magic != CACHE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected "
                              f"{CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    offset = head
    name = blob[offset:offset + name_len].decode("utf-8")
    offset += name_len
    meta = struct.calcsize("<IIQ")
    if offset + meta > len(blob):
        raise DataFormatError(f"{path}: truncated metadata")
    num_classes, feature_dim, count = struct.unpack_from("<IIQ", blob, offset)
    offset += meta
    need = count * 4 + count * feature_dim * 8
    if len(blob) - offset != need:
        raise DataFormatError(f"{path}: payload is {len(blob) - offset} bytes, "
                              f"expected {need}")
    labels = np.frombuffer(blob, dtype="<u4", count=count,
                           offset=offset).astype(np.int64)
    offset += count * 4
    feats = np.frombuffer(blob, dtype="<f8", count=count * feature_dim,
                          offset=offset).astype(np.float64)
    return Dataset(feats.reshape(count, feature_dim), labels,
                   int(num_classes), name)
