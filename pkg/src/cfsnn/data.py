"""Datasets, spike encoding and noise injection.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed, spawn_key=...)``; the same ``(seed, key, shape)`` gives
the same bytes on every platform numpy supports.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NOISE_KINDS = ("uniform", "salt_pepper", "gaussian")
SYNTH_KINDS = ("gaussians", "moons", "temporal_xor")
SPLITS = {"train": 0, "test": 1}


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """PCG64 stream for ``seed`` and an optional spawn key path."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    classes: int
    split: str = "train"
    value_range: tuple | None = None
    temporal: bool = False  # x is [N, T, F] rather than static features

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple:
        return self.x.shape[2:] if self.temporal else self.x.shape[1:]

    def subset(self, index) -> "Dataset":
        return Dataset(self.x[index], self.y[index], self.classes, self.split, self.value_range, self.temporal)


# ---------------------------------------------------------------- IDX files


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: expected magic 0x{expected_magic:08x}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IdxTruncatedError(f"{path}: payload has {len(raw) - header} bytes, header promises {need}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10, split: str = "train") -> Dataset:
    """Load an IDX image/label pair (optionally gzip-compressed); pixels scale to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), classes, split, value_range=(0.0, 1.0))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, compress: bool = False) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">IIII", IMAGES_MAGIC, *images.shape) + images.tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()
    for path, blob in ((images_path, img), (labels_path, lab)):
        Path(path).write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


def load_csv(path, classes: int | None = None, split: str = "train") -> Dataset:
    """Header row, feature columns, then an integer label column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    body = np.array(rows[1:], dtype=object)
    x = body[:, :-1].astype(np.float64)
    y = body[:, -1].astype(np.int64)
    return Dataset(x, y, classes or int(y.max()) + 1, split)


# ---------------------------------------------------------------- synthetic tasks


def synth_dataset(kind: str, n: int, seed: int, *, classes: int = 2, separation: float = 6.0,
                  dim: int = 2, time_steps: int = 4, split: str = "train") -> Dataset:
    """Deterministic synthetic task with ``n`` samples (balanced classes).

    ``gaussians``: unit-variance isotropic clusters whose neighbouring means
    sit ``separation`` apart on a circle. ``moons``: two interleaved half
    circles. ``temporal_xor``: two channels pulse once each on consecutive
    steps; the label is 1 when channel 0 pulses first. With one time step both
    pulses land together and the label carries no information.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if kind in ("moons", "temporal_xor"):
        classes = 2
    if n // classes < 10:
        raise ValueError("synthetic datasets need at least 10 samples per class")
    rng = make_rng(seed, SYNTH_KINDS.index(kind), SPLITS[split])
    y = np.arange(n) % classes
    rng.shuffle(y)
    if kind == "gaussians":
        if dim < 2:
            raise ValueError("gaussians need dim >= 2")
        radius = separation / (2.0 * np.sin(np.pi / classes))
        angle = 2.0 * np.pi * y / classes
        x = rng.standard_normal((n, dim))
        x[:, 0] += radius * np.cos(angle)
        x[:, 1] += radius * np.sin(angle)
        return Dataset(x, y, classes, split)
    if kind == "moons":
        t = rng.uniform(0.0, np.pi, n)
        x = np.where(
            (y == 0)[:, None],
            np.stack([np.cos(t), np.sin(t)], 1),
            np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], 1),
        )
        x = x + 0.1 * rng.standard_normal((n, 2))
        return Dataset(x, y, classes, split)
    x = 0.05 * rng.standard_normal((n, time_steps, 2))
    amp = rng.uniform(0.75, 1.25, (n, 2))
    rows = np.arange(n)
    if time_steps == 1:
        first = np.zeros(n, dtype=int)
        second = first
    else:
        first = rng.integers(0, time_steps - 1, n)
        second = first + 1
    lead = np.where(y == 1, 0, 1)
    x[rows, first, lead] += amp[:, 0]
    x[rows, second, 1 - lead] += amp[:, 1]
    return Dataset(x, y, classes, split, temporal=True)


def make_split(kind: str, n_train: int, n_test: int, seed: int, **kwargs) -> tuple[Dataset, Dataset]:
    return (
        synth_dataset(kind, n_train, seed, split="train", **kwargs),
        synth_dataset(kind, n_test, seed, split="test", **kwargs),
    )


# ---------------------------------------------------------------- encoding


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "direct"
    time_steps: int = 4

    def __post_init__(self):
        if self.mode not in ("direct", "rate"):
            raise ValueError(f"encoder mode must be 'direct' or 'rate', got {self.mode!r}")
        if self.time_steps < 1:
            raise ValueError("encoder time_steps must be >= 1")


def encode_input(x, cfg: EncoderConfig, rng: np.random.Generator | None = None,
                 temporal: bool = False) -> np.ndarray:
    """Return a [T, ...] array for features ``x``.

    ``direct`` repeats the analog values every step; ``rate`` draws
    Bernoulli(x) spikes per step. Temporal inputs ([B, T, F]) are moved to
    time-major order and left unchanged otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if temporal:
        if x.shape[1] != cfg.time_steps:
            raise ValueError(f"sequence has {x.shape[1]} steps, encoder expects {cfg.time_steps}")
        return np.ascontiguousarray(np.swapaxes(x, 0, 1))
    if cfg.mode == "direct":
        return np.repeat(x[None], cfg.time_steps, axis=0)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("rate encoding needs values in [0, 1]")
    if rng is None:
        raise ValueError("rate encoding needs a random generator")
    return (rng.random((cfg.time_steps,) + x.shape) < x).astype(np.float64)


def inject_noise(x, kind: str, epsilon: float, rng: np.random.Generator,
                 value_range: tuple | None = (0.0, 1.0)) -> np.ndarray:
    """Corrupt ``x``; the result is clamped to ``value_range`` when one is given.

    uniform: ``x + eps*U(-1, 1)``; gaussian: ``x + eps*N(0, 1)``;
    salt_pepper: a fraction ``eps`` of elements set to the range ends with
    equal probability.
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if epsilon < 0:
        raise ValueError("noise intensity must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    if kind == "uniform":
        out = x + epsilon * rng.uniform(-1.0, 1.0, x.shape)
    elif kind == "gaussian":
        out = x + epsilon * rng.standard_normal(x.shape)
    else:
        if epsilon > 1:
            raise ValueError("salt_pepper intensity is a fraction and must be <= 1")
        if value_range is None:
            raise ValueError("salt_pepper noise needs a known value range")
        hit = rng.random(x.shape) < epsilon
        high = rng.random(x.shape) < 0.5
        out = np.where(hit, np.where(high, value_range[1], value_range[0]), x)
    if value_range is not None:
        out = np.clip(out, *value_range)
    return out


def augment_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random zero-padded crop plus horizontal flip for [B, C, H, W] batches."""
    b, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    dy = rng.integers(0, 2 * pad + 1, b)
    dx = rng.integers(0, 2 * pad + 1, b)
    flip = rng.random(b) < 0.5
    for i in range(b):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
