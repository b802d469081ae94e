"""Backdoor triggers: additive DCT frequency-block perturbations and corner patches."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import check_images

CHANNELS = {"R": 0, "G": 1, "B": 2}
CORNERS = ("tl", "tr", "bl", "br")


@lru_cache(maxsize=16)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``C[u, x] = c(u) cos(pi (2x+1) u / 2n)``."""
    if n < 1:
        raise ValueError("transform size must be >= 1")
    x = np.arange(n)
    c = np.cos(np.pi * (2 * x[None, :] + 1) * x[:, None] / (2 * n))
    c *= np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    c.setflags(write=False)
    return c


def dct2(m) -> np.ndarray:
    """Orthonormal 2-D DCT-II over the last two axes."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim < 2:
        raise ValueError("dct2 needs at least a 2-d array")
    ch, cw = dct_matrix(m.shape[-2]), dct_matrix(m.shape[-1])
    return ch @ m @ cw.T


def idct2(f) -> np.ndarray:
    """Inverse of :func:`dct2` (the transposed transform)."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim < 2:
        raise ValueError("idct2 needs at least a 2-d array")
    ch, cw = dct_matrix(f.shape[-2]), dct_matrix(f.shape[-1])
    return ch.T @ f @ cw


def _channel_index(channel) -> int:
    if isinstance(channel, str):
        key = channel.strip().upper()
        if key in CHANNELS:
            return CHANNELS[key]
        channel = int(key)
    channel = int(channel)
    if channel not in (0, 1, 2):
        raise ValueError(f"channel must be R/G/B or 0/1/2, got {channel!r}")
    return channel


@dataclass(frozen=True)
class TriggerSpec:
    """Add ``magnitude`` to an s x s block of one channel's DCT coefficients.

    The block covers rows ``u0 .. u0+s-1`` and columns ``v0 .. v0+s-1``.
    """

    channel: int
    block_origin: tuple[int, int]
    block_size: int
    magnitude: float
    target_label: int

    def __post_init__(self):
        object.__setattr__(self, "channel", _channel_index(self.channel))
        u0, v0 = (int(v) for v in self.block_origin)
        object.__setattr__(self, "block_origin", (u0, v0))
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if u0 < 0 or v0 < 0:
            raise ValueError("block origin must be non-negative")
        if not np.isfinite(self.magnitude):
            raise ValueError("magnitude must be finite")
        if self.target_label < 0:
            raise ValueError("target_label must be >= 0")

    def check_fits(self, height: int, width: int) -> None:
        u0, v0 = self.block_origin
        s = self.block_size
        if u0 + s > height or v0 + s > width:
            raise ValueError(
                f"frequency block [{u0},{v0}]-[{u0 + s - 1},{v0 + s - 1}] exceeds {height}x{width} coefficients"
            )

    @property
    def key(self) -> tuple:
        return (self.channel, self.block_origin)

    def block_slices(self) -> tuple[slice, slice]:
        u0, v0 = self.block_origin
        return slice(u0, u0 + self.block_size), slice(v0, v0 + self.block_size)

    def spatial_delta(self, height: int = 32, width: int = 32) -> np.ndarray:
        """Content-independent unclipped perturbation of the chosen channel."""
        self.check_fits(height, width)
        coef = np.zeros((height, width))
        coef[self.block_slices()] = self.magnitude
        return idct2(coef)


@dataclass(frozen=True)
class PatchTriggerSpec:
    """Blend square patches toward white: ``p <- (1 - t) p + t * 255``."""

    transparency: float
    target_label: int
    patch_size: int = 5
    corners: tuple[str, ...] = CORNERS

    def __post_init__(self):
        if not 0 <= self.transparency <= 1:
            raise ValueError("transparency must lie in [0, 1]")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        corners = tuple(self.corners)
        bad = [c for c in corners if c not in CORNERS]
        if bad:
            raise ValueError(f"unknown corners {bad}; choose from {CORNERS}")
        object.__setattr__(self, "corners", corners)

    @property
    def key(self) -> tuple:
        return ("patch", self.patch_size, self.corners, self.transparency)

    def check_fits(self, height: int, width: int) -> None:
        if self.patch_size > min(height, width):
            raise ValueError(f"{self.patch_size}px patch does not fit a {height}x{width} image")

    def mask(self, height: int, width: int) -> np.ndarray:
        self.check_fits(height, width)
        p = self.patch_size
        m = np.zeros((height, width), dtype=bool)
        for corner in self.corners:
            rows = slice(0, p) if corner[0] == "t" else slice(height - p, height)
            cols = slice(0, p) if corner[1] == "l" else slice(width - p, width)
            m[rows, cols] = True
        return m


AnyTrigger = Union[TriggerSpec, PatchTriggerSpec]


def apply_freq_trigger(img, spec: TriggerSpec, clip: bool = True):
    """Poison one image (3 x H x W) or a batch (N x 3 x H x W).

    Returns ``(poisoned, target_label)``. Only the selected channel changes.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (3, 4) or img.shape[-3] != 3:
        raise ValueError(f"expected 3 x H x W image(s), got shape {img.shape}")
    spec.check_fits(*img.shape[-2:])
    out = img.copy()
    coef = dct2(img[..., spec.channel, :, :])
    coef[(..., *spec.block_slices())] += spec.magnitude
    channel = idct2(coef)
    out[..., spec.channel, :, :] = np.clip(channel, 0, 255) if clip else channel
    return out, spec.target_label


def apply_patch_trigger(img, spec: PatchTriggerSpec):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (3, 4):
        raise ValueError(f"expected C x H x W image(s), got shape {img.shape}")
    mask = spec.mask(*img.shape[-2:])
    t = spec.transparency
    out = img.copy()
    out[..., mask] = (1 - t) * img[..., mask] + t * 255.0
    return out, spec.target_label


def apply_trigger(img, spec: AnyTrigger, clip: bool = True):
    if isinstance(spec, TriggerSpec):
        return apply_freq_trigger(img, spec, clip=clip)
    if isinstance(spec, PatchTriggerSpec):
        return apply_patch_trigger(img, spec)
    raise TypeError(f"unsupported trigger {spec!r}")


def check_distinct(triggers: Sequence[AnyTrigger]) -> list[str]:
    """Messages for every pair of triggers that collide on (channel, block origin)."""
    problems = []
    for i in range(len(triggers)):
        for j in range(i + 1, len(triggers)):
            if triggers[i].key == triggers[j].key:
                problems.append(f"attackers {i + 1} and {j + 1} share trigger {triggers[i].key}")
    return problems


class FrequencyTrigger(TransformerMixin, BaseEstimator):
    """Transformer that stamps a DCT frequency-block trigger onto images.

    Parameters mirror :class:`TriggerSpec`; ``clip`` clamps the result to
    [0, 255]. Use :meth:`poison` to also get the relabelled targets.
    """

    def __init__(self, channel=0, block_origin=(15, 15), block_size=3, magnitude=100.0, target_label=0, clip=True):
        self.channel = channel
        self.block_origin = block_origin
        self.block_size = block_size
        self.magnitude = magnitude
        self.target_label = target_label
        self.clip = clip

    def fit(self, X, y=None):
        X = check_images(X, pixel_range=False)
        self.spec_ = TriggerSpec(self.channel, tuple(self.block_origin), self.block_size,
                                 float(self.magnitude), int(self.target_label))
        self.spec_.check_fits(*X.shape[-2:])
        self.input_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            self.fit(X)
        X = check_images(X, shape=self.input_shape_, pixel_range=False)
        return apply_freq_trigger(X, self.spec_, clip=self.clip)[0]

    def poison(self, X):
        Xp = self.transform(X)
        return Xp, np.full(len(Xp), self.spec_.target_label, dtype=np.int64)


class PatchTrigger(TransformerMixin, BaseEstimator):
    """Transformer applying the translucent white corner-patch trigger."""

    def __init__(self, transparency=0.8, target_label=0, patch_size=5, corners=CORNERS):
        self.transparency = transparency
        self.target_label = target_label
        self.patch_size = patch_size
        self.corners = corners

    def fit(self, X, y=None):
        X = check_images(X)
        self.spec_ = PatchTriggerSpec(float(self.transparency), int(self.target_label),
                                      int(self.patch_size), tuple(self.corners))
        self.spec_.check_fits(*X.shape[-2:])
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            self.fit(X)
        return apply_patch_trigger(check_images(X), self.spec_)[0]

    def poison(self, X):
        Xp = self.transform(X)
        return Xp, np.full(len(Xp), self.spec_.target_label, dtype=np.int64)
