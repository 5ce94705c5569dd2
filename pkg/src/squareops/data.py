"""Image dataset ingestion and batch preparation.

Reads the standard CIFAR-10 binary batches: each record is 3073 bytes, one
label byte (0-9) followed by 3072 pixel bytes stored as 1024 red, 1024
green, 1024 blue values in row-major order. Batches are validated
bit-exactly (a training batch must be exactly 30,730,000 bytes).

Pixels are scaled to [0,1] and normalized by fixed per-channel statistics.
A tiny synthetic 64-record file in the same binary format ships with the
package for smoke runs and memorization checks; it is generated data, not
CIFAR-10 imagery.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
BATCH_RECORDS = 10000
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

# frozen per-channel statistics of the 50000 training images (RGB)
CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616])

SMOKE_ASSET = "smoke_batch.bin"
SMOKE_RECORDS = 64


def normalize(images_u8: np.ndarray) -> np.ndarray:
    """uint8 HWC images -> fp64, scaled to [0,1] and channel-normalized."""
    x = images_u8.astype(np.float64) / 255.0
    return (x - CIFAR10_MEAN) / CIFAR10_STD


def augment_crop_flip(images_u8: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pad-4 random crop plus horizontal flip with probability 1/2, per image."""
    n, h, w, c = images_u8.shape
    padded = np.zeros((n, h + 8, w + 8, c), dtype=images_u8.dtype)
    padded[:, 4:4 + h, 4:4 + w, :] = images_u8
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images_u8)
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, oy:oy + h, ox:ox + w, :]
        out[i] = crop[:, ::-1, :] if flips[i] else crop
    return out


@dataclass
class ImageDataset:
    """Raw uint8 images plus labels; batches come out normalized fp64."""

    images: np.ndarray  # (N, 32, 32, 3) uint8
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, idx, augment: bool = False,
              rng: np.random.Generator | None = None):
        imgs = self.images[idx]
        if augment:
            if rng is None:
                raise ValueError("augmentation needs an rng")
            imgs = augment_crop_flip(imgs, rng)
        return normalize(imgs), self.labels[idx]

    def subset(self, n: int) -> "ImageDataset":
        return ImageDataset(self.images[:n].copy(), self.labels[:n].copy())


def _read_batch_file(path, expected_records: int):
    path = Path(path)
    raw = path.read_bytes()
    expected = expected_records * RECORD_BYTES
    if len(raw) != expected:
        raise ValueError(
            f"bad batch file {path}: {len(raw)} bytes, expected {expected}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(expected_records, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise ValueError(f"bad batch file {path}: label byte above 9")
    images = rec[:, 1:].reshape(expected_records, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar10(dir_path) -> tuple[ImageDataset, ImageDataset]:
    """Load the five training batches and the test batch from a directory."""
    dir_path = Path(dir_path)
    train_parts = [_read_batch_file(dir_path / name, BATCH_RECORDS)
                   for name in TRAIN_FILES]
    train = ImageDataset(np.concatenate([p[0] for p in train_parts]),
                         np.concatenate([p[1] for p in train_parts]))
    test_images, test_labels = _read_batch_file(dir_path / TEST_FILE, BATCH_RECORDS)
    return train, ImageDataset(test_images, test_labels)


def write_batch(path, labels: np.ndarray, images_u8: np.ndarray) -> None:
    """Write records in the binary batch layout (label byte + RGB planes)."""
    n = labels.shape[0]
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.transpose(0, 3, 1, 2).reshape(n, 3072)
    Path(path).write_bytes(rec.tobytes())


def synthesize_smoke(n: int = SMOKE_RECORDS, seed: int = 20240 + 501):
    """Deterministic synthetic records with a strong class-color signal."""
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % 10).astype(np.int64)
    base = rng.integers(30, 220, size=(10, 1, 1, 3))
    images = base[labels] + rng.integers(-25, 26, size=(n, 32, 32, 3))
    return labels, np.clip(images, 0, 255).astype(np.uint8)


def smoke_asset_path() -> Path:
    return Path(importlib.resources.files("squareops") / "assets" / SMOKE_ASSET)


def load_smoke(path=None) -> ImageDataset:
    """Load the bundled (or a user-provided) small batch file."""
    path = Path(path) if path is not None else smoke_asset_path()
    size = path.stat().st_size
    if size % RECORD_BYTES != 0:
        raise ValueError(f"bad batch file {path}: {size} bytes is not a "
                         f"multiple of {RECORD_BYTES}")
    images, labels = _read_batch_file(path, size // RECORD_BYTES)
    return ImageDataset(images, labels)
