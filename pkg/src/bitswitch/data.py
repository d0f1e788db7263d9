"""Small deterministic datasets for desk-scale experiments.

Synthetic generators cover the common cases (separable gaussian blobs for
classification sanity checks, two interleaved moons for a nonlinear
boundary) and an IDX reader handles the classic image/label file pair.
Everything returns float32 features and int64 labels.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class DatasetSpec:
    """Shape summary a trainer can size a network from."""

    num_features: int
    num_classes: int
    input_shape: tuple[int, ...]

    @classmethod
    def of(cls, x: np.ndarray, y: np.ndarray) -> "DatasetSpec":
        classes = int(y.max()) + 1 if y.size else 0
        return cls(
            num_features=int(np.prod(x.shape[1:])),
            num_classes=classes,
            input_shape=tuple(x.shape[1:]),
        )


def gaussian_blobs(
    samples: int,
    classes: int,
    features: int,
    seed: int,
    spread: float = 1.0,
    separation: float = 4.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic gaussian clusters with centers drawn once per class.

    Labels cycle through the classes so every class gets within one sample
    of ``samples / classes`` points.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if samples < classes:
        raise ConfigError(f"{samples} samples cannot cover {classes} classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(classes, features))
    y = np.arange(samples) % classes
    x = centers[y] + rng.normal(0.0, spread, size=(samples, features))
    order = rng.permutation(samples)
    return x[order].astype(np.float32), y[order].astype(np.int64)


def two_moons(samples: int, seed: int, noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved half-circles in the plane."""
    rng = np.random.default_rng(seed)
    half = samples // 2
    t_outer = rng.uniform(0.0, np.pi, size=half)
    t_inner = rng.uniform(0.0, np.pi, size=samples - half)
    outer = np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1)
    inner = np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1)
    x = np.concatenate([outer, inner], axis=0)
    x += rng.normal(0.0, noise, size=x.shape)
    y = np.concatenate([np.zeros(half), np.ones(samples - half)])
    order = rng.permutation(samples)
    return x[order].astype(np.float32), y[order].astype(np.int64)


def train_eval_split(
    x: np.ndarray, y: np.ndarray, eval_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic shuffled split; the eval part gets the ceiling."""
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"{x.shape[0]} inputs vs {y.shape[0]} labels")
    rng = np.random.default_rng(seed)
    order = rng.permutation(x.shape[0])
    n_eval = max(1, int(np.ceil(eval_fraction * x.shape[0])))
    eval_idx, train_idx = order[:n_eval], order[n_eval:]
    return x[train_idx], y[train_idx], x[eval_idx], y[eval_idx]


_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: str) -> np.ndarray:
    """Read one IDX file (optionally gzip-compressed, by extension)."""
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise DimensionError(f"{path}: too short for an IDX header")
    zero, zero2, type_byte, ndim = struct.unpack(">BBBB", data[:4])
    if zero != 0 or zero2 != 0:
        raise DimensionError(f"{path}: bad IDX magic {data[:4]!r}")
    if type_byte not in _IDX_DTYPES:
        raise DimensionError(f"{path}: unknown IDX element type 0x{type_byte:02x}")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise DimensionError(f"{path}: truncated IDX dimension list")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[type_byte])
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = data[header_end:]
    if len(payload) != expected:
        raise DimensionError(
            f"{path}: payload is {len(payload)} bytes, dimensions {dims} need {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def load_idx_pair(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Image/label IDX pair -> (float32 images scaled to [0, 1], int64 labels)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DimensionError(f"labels must be one-dimensional, got shape {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise DimensionError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    x = images.astype(np.float32)
    if images.dtype == np.uint8:
        x /= 255.0
    if x.ndim == 3:  # H x W images -> single channel
        x = x[:, None, :, :]
    return x, labels.astype(np.int64)
