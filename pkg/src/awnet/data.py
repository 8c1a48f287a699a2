"""Datasets: CIFAR binary records and a synthetic Gaussian-blob benchmark."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class CifarFormatError(ValueError):
    def __init__(self, message: str, path: str | Path, offset: int):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass
class DatasetHandle:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N,C,H,W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, index) -> "DatasetHandle":
        return DatasetHandle(self.images[index], self.labels[index], self.num_classes)

    def shuffled(self, seed: int) -> "DatasetHandle":
        return self.subset(np.random.default_rng(seed).permutation(len(self)))

    def split(self, n_first: int) -> tuple["DatasetHandle", "DatasetHandle"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]


def _read_records(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    n, rem = divmod(raw.size, CIFAR_RECORD)
    if rem:
        raise CifarFormatError(
            f"truncated record: {raw.size} bytes is not a multiple of {CIFAR_RECORD}", path, n * CIFAR_RECORD
        )
    rec = raw.reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise CifarFormatError(f"label byte {labels[bad[0]]} >= 10 in record {bad[0]}", path, int(bad[0]) * CIFAR_RECORD)
    images = rec[:, 1:].reshape((n,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return images, labels


def load_cifar_binary(path: str | Path, split: str = "train") -> DatasetHandle:
    """Read CIFAR-10 binary batches.

    ``path`` is either one ``.bin`` file or the ``cifar-10-batches-bin``
    directory, in which case ``split`` picks the train (five batches, in order)
    or test file. Each record is one label byte followed by 3072 pixel bytes
    (R, G, B planes, row-major).
    """
    path = Path(path)
    if path.is_dir():
        names = {"train": CIFAR_TRAIN_FILES, "test": CIFAR_TEST_FILES}.get(split)
        if names is None:
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        files = [path / name for name in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR files: {missing}")
    else:
        files = [path]
    parts = [_read_records(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return DatasetHandle(images, labels, 10)


def write_cifar_binary(path: str | Path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of the loader for uint8 images of shape (N,3,32,32)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rec.tobytes())


def _blob_prototypes(rng, classes, channels, size, blobs, contrast):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    protos = np.empty((classes, channels, size, size))
    for c in range(classes):
        img = np.full((channels, size, size), 0.3) + rng.uniform(0.0, 0.1, size=(channels, 1, 1))
        for _ in range(blobs):
            cy, cx = rng.uniform(0, size - 1, size=2)
            width = rng.uniform(0.12, 0.3) * size
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            img += rng.uniform(contrast[0], contrast[1], size=(channels, 1, 1)) * bump
        protos[c] = img
    return protos


def make_synthetic(classes: int = 10, n_per_class: int = 50, size: int = 8, seed: int = 0,
                   channels: int = 3, noise: float = 0.03, blobs: int = 2,
                   amplitude_jitter: float = 0.15,
                   contrast: tuple[float, float] = (0.05, 0.2)) -> DatasetHandle:
    """Gaussian-blob class prototypes with per-sample noise, clipped to [0, 1].

    Each class is a sum of ``blobs`` coloured Gaussian bumps (peak heights
    drawn from ``contrast``) on a tinted background. A sample scales its
    prototype's contrast by ``1 + U(-j, j)`` and adds i.i.d. pixel noise of
    standard deviation ``noise``. Samples are
    ordered class-major; call :meth:`DatasetHandle.shuffled` for a random order.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if size < 4:
        raise ValueError("image size must be at least 4")
    if n_per_class < 1:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    protos = _blob_prototypes(rng, classes, channels, size, blobs, contrast)
    labels = np.repeat(np.arange(classes), n_per_class)
    base = protos[labels]
    mean = base.mean(axis=(1, 2, 3), keepdims=True)
    scale = 1.0 + rng.uniform(-amplitude_jitter, amplitude_jitter, size=(len(labels), 1, 1, 1))
    images = mean + (base - mean) * scale + rng.normal(0.0, noise, size=base.shape)
    return DatasetHandle(np.clip(images, 0.0, 1.0), labels, classes)


def synthetic_splits(classes: int, n_train: int, n_holdout: int, size: int, seed: int,
                     **kw) -> tuple[DatasetHandle, DatasetHandle]:
    """Train / holdout sets sharing class prototypes, both shuffled."""
    full = make_synthetic(classes, n_train + n_holdout, size, seed, **kw)
    per = n_train + n_holdout
    idx = np.arange(len(full)).reshape(classes, per)
    train = full.subset(idx[:, :n_train].reshape(-1)).shuffled(seed + 1)
    hold = full.subset(idx[:, n_train:].reshape(-1)).shuffled(seed + 2)
    return train, hold
