"""Dataset ingestion: IDX-format files (MNIST layout) and synthetic blobs."""

from __future__ import annotations

import struct

import numpy as np

from ..linalg import Rng, gaussian
from ..models import Dataset

__all__ = [
    "IdxFormatError",
    "load_mnist_idx",
    "split_train_val",
    "subset_first_k",
    "synth_blobs",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _read_be32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, offset)[0]


def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    magic = _read_be32(buf, 0, path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x} (images)"
        )
    count = _read_be32(buf, 4, path)
    rows = _read_be32(buf, 8, path)
    cols = _read_be32(buf, 12, path)
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise IdxFormatError(f"{path}: truncated pixel data ({len(buf)} < {need} bytes)")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64)


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    magic = _read_be32(buf, 0, path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x} (labels)"
        )
    count = _read_be32(buf, 4, path)
    if len(buf) < 8 + count:
        raise IdxFormatError(f"{path}: truncated label data")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_mnist_idx(
    images_path: str,
    labels_path: str,
    standardize: bool = False,
) -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1] by /255.

    With ``standardize`` each feature is shifted/scaled to mean 0, unit
    variance (features with zero variance are left centered only).
    """
    images = _read_idx_images(images_path) / 255.0
    labels = _read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if standardize:
        mean = images.mean(axis=0)
        std = images.std(axis=0)
        std[std == 0.0] = 1.0
        images = (images - mean) / std
    return Dataset(images, labels, num_classes=int(labels.max()) + 1 if labels.size else 1)


def subset_first_k(ds: Dataset, k: int, seed: int) -> Dataset:
    """First k samples of a deterministic shuffle of the dataset."""
    if not (1 <= k <= ds.n):
        raise ValueError(f"subset size {k} out of range for N={ds.n}")
    perm = Rng(seed).child(0x5B5E7).permutation(ds.n)
    return ds.subset(perm[:k])


def split_train_val(ds: Dataset, n_val: int, seed: int):
    """Deterministic (train, val) split; n_val samples held out.

    split_train_val(ds, 5000, seed) on the 50k MNIST training set gives
    the standard 45,000 / 5,000 split.
    """
    if not (1 <= n_val < ds.n):
        raise ValueError(f"n_val {n_val} out of range for N={ds.n}")
    perm = Rng(seed).child(0x511F7).permutation(ds.n)
    return ds.subset(perm[n_val:]), ds.subset(perm[:n_val])


def synth_blobs(
    d_x: int,
    d_y: int,
    n_per_class: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Gaussian clusters: class means at separation * (random unit vector),
    identity covariance. Linearly separable for large separation."""
    if d_x < 1 or d_y < 1 or n_per_class < 1:
        raise ValueError("d_x, d_y and n_per_class must be positive")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = Rng(seed)
    mean_rng = rng.child(1)
    means = np.zeros((d_y, d_x))
    for c in range(d_y):
        u = gaussian(mean_rng, d_x)
        means[c] = separation * u / np.linalg.norm(u)
    inputs = np.zeros((d_y * n_per_class, d_x))
    labels = np.zeros(d_y * n_per_class, dtype=np.int64)
    for c in range(d_y):
        noise = gaussian(rng.child(2 + c), d_x * n_per_class).reshape(n_per_class, d_x)
        sl = slice(c * n_per_class, (c + 1) * n_per_class)
        inputs[sl] = means[c] + noise
        labels[sl] = c
    # interleave classes so contiguous batches stay class-balanced
    order = np.arange(d_y * n_per_class).reshape(d_y, n_per_class).T.reshape(-1)
    return Dataset(inputs[order], labels[order], num_classes=d_y)
