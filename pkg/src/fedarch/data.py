"""Synthetic labeled images, the FLDS dataset file format, and normalization.

FLDS layout (little-endian)::

    magic "FLDS" | version u32 = 1 | N u32 | C u32 | H u32 | W u32 | num_classes u32
    labels  N x u16
    splits  N x u8   (0 = train, 1 = val, 2 = test)
    pixels  N*C*H*W x f32, row-major [N, C, H, W]
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}

MAGIC = b"FLDS"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


class FldsError(ValueError):
    """Structured FLDS load error; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    splits: np.ndarray  # uint8 [N]
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.splits.shape != (n,):
            raise ValueError("labels and splits need one entry per image")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if n and not np.isin(self.splits, (TRAIN, VAL, TEST)).all():
            raise ValueError("split tags must be 0 (train), 1 (val) or 2 (test)")

    def __len__(self) -> int:
        return self.images.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.splits, other.splits)
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    @property
    def train_indices(self) -> np.ndarray:
        return self.indices(TRAIN)

    @property
    def val_indices(self) -> np.ndarray:
        return self.indices(VAL)

    @property
    def test_indices(self) -> np.ndarray:
        return self.indices(TEST)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 100
    image_size: int = 16
    channels: int = 1
    noise_std: float = 0.3
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    waves: int = 3
    max_frequency: int = 3
    name: str = "synthetic"

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.num_classes < 1 or self.image_size < 1 or self.channels < 1:
            raise ValueError("num_classes, image_size and channels must be >= 1")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split must be three non-negative fractions summing to 1")


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """One [C, H, W] image per class: a sum of random low-frequency 2-D cosines,
    scaled to unit RMS."""
    rng = np.random.default_rng([spec.seed, 0])
    size = spec.image_size
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    protos = np.zeros((spec.num_classes, spec.channels, size, size))
    for k in range(spec.num_classes):
        for c in range(spec.channels):
            img = np.zeros((size, size))
            for _ in range(spec.waves):
                fy, fx = rng.integers(0, spec.max_frequency + 1, size=2)
                if fy == 0 and fx == 0:
                    fx = 1
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.5, 1.0)
                img += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
            img /= np.sqrt(np.mean(img**2)) + 1e-12
            protos[k, c] = img
    return protos.astype(np.float32)


def split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Balanced dataset of noisy class prototypes with a stratified split."""
    protos = class_prototypes(spec)
    rng = np.random.default_rng([spec.seed, 1])
    per = spec.samples_per_class
    n = spec.num_classes * per
    labels = np.repeat(np.arange(spec.num_classes), per)
    noise = rng.standard_normal((n, spec.channels, spec.image_size, spec.image_size)).astype(np.float32)
    images = protos[labels] + np.float32(spec.noise_std) * noise

    n_train, n_val, _ = split_counts(per, spec.split)
    splits = np.empty(n, dtype=np.uint8)
    for k in range(spec.num_classes):
        tags = np.array([TRAIN] * n_train + [VAL] * n_val + [TEST] * (per - n_train - n_val), dtype=np.uint8)
        splits[k * per : (k + 1) * per] = rng.permutation(tags)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), splits, spec.num_classes, spec.name)


# ---------------------------------------------------------------------------
# FLDS
# ---------------------------------------------------------------------------

def encode_flds(dataset: Dataset) -> bytes:
    n, c, h, w = dataset.images.shape
    if dataset.num_classes > 65536:
        raise ValueError("FLDS stores labels as u16; at most 65536 classes")
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, dataset.num_classes)
    return b"".join(
        [
            header,
            dataset.labels.astype("<u2").tobytes(),
            dataset.splits.astype("u1").tobytes(),
            np.ascontiguousarray(dataset.images, dtype="<f4").tobytes(),
        ]
    )


def decode_flds(buf: bytes, name: str = "flds") -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FldsError("bad magic", f"expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise FldsError("truncated header", f"{len(buf)} of {_HEADER.size} bytes")
    _, version, n, c, h, w, num_classes = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FldsError("unsupported version", str(version))
    expected = _HEADER.size + 2 * n + n + 4 * n * c * h * w
    if len(buf) < expected:
        raise FldsError("truncated payload", f"expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise FldsError("trailing bytes", f"expected {expected} bytes, got {len(buf)}")
    off = _HEADER.size
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += 2 * n
    splits = np.frombuffer(buf, dtype="u1", count=n, offset=off).copy()
    off += n
    pixels = np.frombuffer(buf, dtype="<f4", count=n * c * h * w, offset=off)
    if n and labels.max() >= num_classes:
        raise FldsError("label out of range", f"label {int(labels.max())} >= num_classes {num_classes}")
    if n and splits.max() > TEST:
        raise FldsError("bad split tag", str(int(splits.max())))
    images = pixels.astype(np.float32).reshape(n, c, h, w)
    return Dataset(images, labels, splits, num_classes, name)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_flds(dataset: Dataset, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_flds(dataset))


def load_flds(path: str | os.PathLike) -> Dataset:
    buf = Path(path).read_bytes()
    return decode_flds(buf, name=Path(path).stem)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def channel_stats(dataset: Dataset, split: int | None = TRAIN) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std, computed in float64."""
    imgs = dataset.images if split is None else dataset.images[dataset.splits == split]
    x = imgs.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(dataset: Dataset, mean, std) -> Dataset:
    """``(x - mean) / std`` per channel."""
    c = dataset.images.shape[1]
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (c,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), (c,))
    if np.any(std <= 0):
        raise ValueError("normalize: std must be > 0 for every channel")
    x = (dataset.images.astype(np.float64) - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(dataset, images=x.astype(np.float32))
