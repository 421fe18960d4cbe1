"""Evaluation measures for reconstructed images and bitstreams.

All image metrics take float arrays in the [0, 1] range, either (H, W)
grayscale or (3, H, W) RGB. Pixel-difference metrics treat channels
jointly; SSIM works on the luminance plane.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# BT.601 luminance weights for RGB input
_LUMA = np.array([0.299, 0.587, 0.114])

_PLOSS_SCALES = 3
_PLOSS_FILTERS = 8
_PLOSS_SEED = 0x5EED


@dataclass
class MetricReport:
    mse: float
    required_mse: float
    ssim: float
    proxy_ploss: float
    ber: Optional[float] = None
    miou: Optional[float] = None

    def __post_init__(self):
        if self.mse < 0 or self.required_mse < 0:
            raise ValueError("squared-error metrics cannot be negative")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if self.proxy_ploss < 0:
            raise ValueError("proxy_ploss cannot be negative")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def required_mse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared difference over the pixels where mask == 1.

    mask has shape (H, W) and applies to every channel. An all-zero
    mask has no required region to score and raises ValueError.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.asarray(mask, dtype=bool)
    if a.ndim == 3:
        if m.shape != a.shape[:2]:
            raise ValueError(f"mask shape {m.shape} does not match image "
                             f"plane {a.shape[:2]}")
        m = np.broadcast_to(m[..., None], a.shape)
    elif m.shape != a.shape:
        raise ValueError(f"mask shape {m.shape} does not match image "
                         f"{a.shape}")
    if not m.any():
        raise ValueError("required-region mask selects no pixels")
    diff = (a - b)[m]
    return float(np.mean(diff ** 2))


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return np.tensordot(img, _LUMA, axes=(2, 0))
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over sliding 8x8 windows of the luminance plane."""
    ya = _luminance(a)
    yb = _luminance(b)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch {ya.shape} vs {yb.shape}")
    if min(ya.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ya.shape} smaller than "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    wa = sliding_window_view(ya, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(yb, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _avg_pool2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 0::2, 1::2]
                   + img[..., 1::2, 0::2] + img[..., 1::2, 1::2])


def _filter_bank(channels: int) -> np.ndarray:
    rng = np.random.default_rng(_PLOSS_SEED)
    bank = rng.normal(size=(_PLOSS_FILTERS, channels, 3, 3))
    # zero-mean filters respond to structure, not to brightness offsets
    bank -= bank.mean(axis=(-2, -1), keepdims=True)
    return bank


def _feature_maps(img: np.ndarray, bank: np.ndarray) -> np.ndarray:
    windows = sliding_window_view(img, (3, 3), axis=(-2, -1))
    return np.tensordot(bank, windows, axes=([1, 2, 3], [0, 3, 4]))


def proxy_ploss(a: np.ndarray, b: np.ndarray) -> float:
    """Feature-space distance from a fixed random filter bank.

    Both images pass through the same seeded 3x3 convolution bank at
    three dyadic scales; per-scale RMS distances between the feature
    maps are summed. This is a stand-in for perceptual losses built on
    pretrained networks, which are outside this package's scope.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    else:
        a = a.transpose(2, 0, 1)
        b = b.transpose(2, 0, 1)
    bank = _filter_bank(a.shape[0])
    total = 0.0
    for _ in range(_PLOSS_SCALES):
        if min(a.shape[-2:]) < 3:
            break
        fa = _feature_maps(a, bank)
        fb = _feature_maps(b, bank)
        total += float(np.sqrt(np.mean((fa - fb) ** 2)))
        a = _avg_pool2(a)
        b = _avg_pool2(b)
    return total


def ber(bits_a: np.ndarray, bits_b: np.ndarray) -> float:
    bits_a = np.asarray(bits_a).ravel()
    bits_b = np.asarray(bits_b).ravel()
    if bits_a.shape != bits_b.shape:
        raise ValueError(f"length mismatch {bits_a.size} vs {bits_b.size}")
    if bits_a.size == 0:
        raise ValueError("empty bitstream")
    return float(np.mean(bits_a != bits_b))


def miou(segmap_a: np.ndarray, segmap_b: np.ndarray,
         num_categories: int) -> float:
    """Mean intersection-over-union across categories.

    Categories that appear in neither map are excluded from the mean
    rather than counted as perfect or as failures.
    """
    a = np.asarray(segmap_a)
    b = np.asarray(segmap_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    scores = []
    for c in range(num_categories):
        in_a = a == c
        in_b = b == c
        union = np.count_nonzero(in_a | in_b)
        if union == 0:
            continue
        scores.append(np.count_nonzero(in_a & in_b) / union)
    if not scores:
        raise ValueError("no categories present in either map")
    return float(np.mean(scores))
