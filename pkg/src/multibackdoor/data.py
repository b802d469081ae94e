"""Datasets: synthetic shape images, CIFAR-style binary records, Dirichlet splits."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from os import PathLike
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .validation import check_images, check_labels

RECORD_PIXELS = 3 * 32 * 32
RECORD_BYTES = 1 + RECORD_PIXELS


class LabeledExample(NamedTuple):
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    """Images (N x C x H x W, float64 in [0, 255]) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.images = check_images(self.images)
        self.labels = check_labels(self.labels, self.n_classes)
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledExample:
        return LabeledExample(self.images[i], int(self.labels[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


# ---------------------------------------------------------------- synthetic

_SIZE = 32
_NOISE_STD = 12.0
# noise is blurred so that, like natural photos, images carry little energy at high frequencies
_NOISE_BLUR = 1.5
_HUE_JITTER = 0.06
_SHIFT = 4


def _pattern(label: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground mask in [0, 1] for one class, with position/size jitter."""
    yy, xx = np.mgrid[0:_SIZE, 0:_SIZE].astype(np.float64)
    cy, cx = (_SIZE - 1) / 2 + rng.integers(-_SHIFT, _SHIFT + 1, size=2)
    half = rng.uniform(6.0, 9.0)
    period = rng.uniform(5.0, 7.0)
    phase = rng.uniform(0, period)
    if label == 0:  # filled square
        return ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)).astype(float)
    if label == 1:  # filled disc
        return (np.hypot(yy - cy, xx - cx) <= half + 1).astype(float)
    if label == 2:  # horizontal stripes
        return (((yy + phase) % period) < period / 2).astype(float)
    if label == 3:  # vertical stripes
        return (((xx + phase) % period) < period / 2).astype(float)
    if label == 4:  # diagonal stripes
        return (((xx + yy + phase) % (1.4 * period)) < 0.7 * period).astype(float)
    if label == 5:  # left-to-right ramp
        return np.clip((xx - cx) / (2 * half) + 0.5, 0, 1)
    if label == 6:  # top-to-bottom ramp
        return np.clip((yy - cy) / (2 * half) + 0.5, 0, 1)
    if label == 7:  # plus sign
        bar = rng.uniform(2.0, 3.5)
        return (((np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= half + 3))
                | ((np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= half + 3))).astype(float)
    if label == 8:  # ring
        r = np.hypot(yy - cy, xx - cx)
        return ((r <= half + 2) & (r >= half - 2)).astype(float)
    # checkerboard
    cell = int(rng.integers(4, 7))
    return ((((yy + phase) // cell) + ((xx + phase) // cell)) % 2).astype(float)


def synth_shapes(seed: int, n_per_class: int, n_classes: int = 10) -> Dataset:
    """Deterministic 32x32 RGB shape dataset, ``n_per_class`` images per class.

    Each class has its own geometric pattern and base hue; samples jitter the
    position, scale, hue and background, then get additive Gaussian noise.
    """
    if not 1 <= n_classes <= 10:
        raise ValueError("synth_shapes supports 1..10 classes")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    images = np.empty((n, 3, _SIZE, _SIZE))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    for i, label in enumerate(labels):
        mask = _pattern(int(label), rng)
        hue = (label / n_classes + rng.uniform(-_HUE_JITTER, _HUE_JITTER)) % 1.0
        fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0))) * 255
        bg = rng.uniform(0, 90, size=3)
        img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
        noise = gaussian_filter(rng.normal(0.0, 1.0, size=img.shape), sigma=(0, _NOISE_BLUR, _NOISE_BLUR))
        img += noise * (_NOISE_STD / noise.std())
        images[i] = np.clip(img, 0, 255)
    return Dataset(images, labels, n_classes)


# ---------------------------------------------------------------- raw binary

def read_raw_bin(path: str | PathLike, n_classes: int) -> Dataset:
    """Read CIFAR-10 style records: 1 label byte + 3072 channel-major pixel bytes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise ValueError(f"{path}: empty file")
    if raw.size % RECORD_BYTES:
        raise ValueError(
            f"{path}: malformed record stream, {raw.size} bytes is not a multiple of {RECORD_BYTES}"
            f" ({raw.size % RECORD_BYTES} trailing bytes)"
        )
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise ValueError(f"{path}: record {bad[0]} has label {labels[bad[0]]} >= {n_classes}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return Dataset(images, labels, n_classes)


def write_raw_bin(ds: Dataset, path: str | PathLike) -> None:
    """Write 32x32x3 ``ds`` in the record layout read by :func:`read_raw_bin`."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise ValueError("raw binary records hold 3 x 32 x 32 images only")
    if ds.n_classes > 256:
        raise ValueError("labels must fit in one byte")
    pix = np.clip(np.rint(ds.images), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    rec = np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1)
    rec.tofile(path)


# ---------------------------------------------------------------- partition

@dataclass
class PartitionPlan:
    client_indices: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def is_partition_of(self, n: int) -> bool:
        if not self.client_indices:
            return n == 0
        allidx = np.concatenate(self.client_indices)
        return len(allidx) == n and np.array_equal(np.sort(allidx), np.arange(n))


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``shares``."""
    shares = np.asarray(shares, dtype=np.float64)
    quota = shares / shares.sum() * total
    counts = np.floor(quota).astype(np.int64)
    short = total - counts.sum()
    if short:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, n_clients: int, alpha: float, seed: int) -> PartitionPlan:
    """Non-IID split: per class, client shares ~ Dir(alpha), largest-remainder counts."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(n_clients, float(alpha)))
        if not np.isfinite(shares).all() or shares.sum() <= 0:
            # extreme alpha underflow: all mass on one client
            shares = np.eye(n_clients)[rng.integers(n_clients)]
        counts = largest_remainder(shares, idx.size)
        for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            parts[client].append(chunk)
    return PartitionPlan([np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.int64) for p in parts])
