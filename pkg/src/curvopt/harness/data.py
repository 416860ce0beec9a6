"""Dataset generation and loading for the benchmark studies.

Synthetic regression (gaussian design, linear teacher plus noise) stands in
for the lane-scaling workload; gaussian blobs stand in for the image
classification workloads at desk scale. IDX files (big-endian u8 image and
label containers) can be loaded when a real dataset is available locally;
nothing is ever downloaded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numeric import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxParseError(ValueError):
    """Malformed IDX file; the message names the failing offset."""


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    loss_kind: str  # "mse" | "ce"
    n_classes: int | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]


def _split(X: np.ndarray, y: np.ndarray, loss_kind: str, n_classes, train_frac: float):
    n_train = int(X.shape[0] * train_frac)
    train = Dataset(X[:n_train], y[:n_train], loss_kind, n_classes)
    test = Dataset(X[n_train:], y[n_train:], loss_kind, n_classes)
    return train, test


def gen_regression(
    n: int, d: int, noise_std: float, seed: int, train_frac: float = 0.9
) -> tuple[Dataset, Dataset]:
    """Linear teacher y = X beta + noise on an iid gaussian design; 90/10 split."""
    rng = Rng(seed)
    X = rng.normal(n * d).reshape(n, d)
    beta = rng.normal(d)
    noise = rng.normal(n) * noise_std
    y = (X @ beta + noise)[:, None]
    return _split(X, y, "mse", None, train_frac)


def gen_classification(
    n: int,
    d: int,
    classes: int,
    separation: float,
    seed: int,
    train_frac: float = 0.9,
) -> tuple[Dataset, Dataset]:
    """Balanced gaussian blobs with unit within-class noise.

    The first 2d class means sit on the signed coordinate axes at radius
    separation/2 (so axis-sharing classes are `separation` apart); any
    further classes get random unit directions.
    """
    if classes < 2:
        raise ValueError("gen_classification requires classes >= 2")
    rng = Rng(seed)
    means = np.zeros((classes, d))
    for k in range(classes):
        if k < 2 * d:
            means[k, k // 2] = (separation / 2.0) * (1.0 if k % 2 == 0 else -1.0)
        else:
            u = rng.normal(d)
            means[k] = (separation / 2.0) * u / np.linalg.norm(u)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    X = means[labels] + rng.normal(n * d).reshape(n, d)
    return _split(X, labels.astype(np.int64), "ce", classes, train_frac)


def _read_header(buf: bytes, path: str, magic_expected: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(buf) < header_len:
        raise IdxParseError(f"{path}: truncated header at offset {len(buf)} (need {header_len} bytes)")
    magic = struct.unpack(">i", buf[:4])[0]
    if magic != magic_expected:
        raise IdxParseError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{magic_expected:08x}"
        )
    return struct.unpack(f">{n_dims}i", buf[4:header_len])


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair into flattened [0,1] float vectors."""
    images_path, labels_path = str(images_path), str(labels_path)
    img_buf = Path(images_path).read_bytes()
    count, rows, cols = _read_header(img_buf, images_path, IDX_IMAGES_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(img_buf) != expected:
        raise IdxParseError(
            f"{images_path}: expected {expected} bytes, got {len(img_buf)} (truncated at offset {len(img_buf)})"
        )
    pixels = np.frombuffer(img_buf, dtype=np.uint8, offset=16)
    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0

    lab_buf = Path(labels_path).read_bytes()
    (lab_count,) = _read_header(lab_buf, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lab_buf) != 8 + lab_count:
        raise IdxParseError(
            f"{labels_path}: expected {8 + lab_count} bytes, got {len(lab_buf)} (truncated at offset {len(lab_buf)})"
        )
    if lab_count != count:
        raise IdxParseError(
            f"{labels_path}: label count {lab_count} does not match image count {count}"
        )
    y = np.frombuffer(lab_buf, dtype=np.uint8, offset=8).astype(np.int64)
    n_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, "ce", n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write a u8 IDX pair (images: (n, rows, cols), labels: (n,))."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())
