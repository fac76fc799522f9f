"""Low-pass light maps and high-pass detail maps.

The light map is a convolved-image surrogate for illumination: Gaussian blur,
pixel subsampling, and bilinear upsampling back to the input size. The HF map
is the unsharp-mask complement ``img - blur(img) + offset``, so the two bands
reconstruct the input exactly when the blur widths match and no subsampling
is applied.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass

import numpy as np

from .images import check_image, resize_bilinear


@dataclass(frozen=True)
class FilterParams:
    sigma_low: float = 8.0
    sample_stride: int = 4
    sigma_high: float = 2.0
    hf_offset: float = 0.5

    def __post_init__(self):
        if not self.sigma_low > 0 or not self.sigma_high >= 0:
            raise ValueError("sigma_low must be > 0 and sigma_high >= 0")
        if int(self.sample_stride) != self.sample_stride or self.sample_stride < 1:
            raise ValueError("sample_stride must be an integer >= 1")


@dataclass(frozen=True)
class ControlSet:
    light_map: np.ndarray
    hf_map: np.ndarray  # signed, recentered on hf_offset
    hf_offset: float = 0.5

    @property
    def shape(self):
        return self.light_map.shape


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ceil(3 sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    """(n, n) operator for one axis; clamped taps fold onto the edge pixels."""
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for offset, tap in zip(range(-radius, radius + 1), k):
        np.add.at(mat, (rows, np.clip(rows + offset, 0, n - 1)), tap)
    mat.setflags(write=False)
    return mat


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the first two axes with edge clamping.

    ``sigma == 0`` returns an unchanged copy. Accepts images, masks and
    latents alike (no range check).
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    arr = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    h, w = arr.shape[:2]
    out = np.tensordot(_blur_matrix(h, float(sigma)), arr, axes=(1, 0))
    out = np.tensordot(_blur_matrix(w, float(sigma)), out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def low_band(x: np.ndarray, p: FilterParams) -> np.ndarray:
    """Blur, keep the top-left pixel of each stride block, upsample back.

    Linear and unclamped, so it can act on latents.
    """
    h, w = x.shape[:2]
    blurred = gaussian_blur(x, p.sigma_low)
    s = int(p.sample_stride)
    if s == 1:
        return blurred
    sampled = blurred[::s, ::s]
    return resize_bilinear(sampled, h, w)


def high_band(x: np.ndarray, sigma_high: float) -> np.ndarray:
    """Zero-centered detail band ``x - blur(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return x - gaussian_blur(x, sigma_high)


def extract_light_map(img: np.ndarray, p: FilterParams = FilterParams()) -> np.ndarray:
    img = check_image(img)
    return np.clip(low_band(img, p), 0.0, 1.0)


def extract_hf_map(img: np.ndarray, p: FilterParams = FilterParams()) -> np.ndarray:
    """High-pass map recentered on ``p.hf_offset``; may leave [0, 1]."""
    img = check_image(img)
    return high_band(img, p.sigma_high) + p.hf_offset


def extract_controls(ref_like: np.ndarray, src_like: np.ndarray, p: FilterParams = FilterParams()) -> ControlSet:
    """Light map from the reference-like image, HF map from the source-like one."""
    ref_like = check_image(ref_like)
    src_like = check_image(src_like)
    if ref_like.shape != src_like.shape:
        raise ValueError(f"dimension mismatch: {ref_like.shape} vs {src_like.shape}")
    return ControlSet(extract_light_map(ref_like, p), extract_hf_map(src_like, p), p.hf_offset)


def reconstruct(controls: ControlSet) -> np.ndarray:
    """Sum of the two bands; exact inverse when sigma_low == sigma_high and stride 1."""
    return controls.light_map + (controls.hf_map - controls.hf_offset)
