"""Deterministic image primitives: resampling, luminance, entropy, patches, metrics.

Images are numpy float64 arrays in [0, 1], either H x W (gray) or H x W x C
with C in {1, 3}. All functions are pure.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from . import kernels
from .errors import ValidationError

BT601 = (0.299, 0.587, 0.114)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an RGB image; gray images pass through."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    if a.shape[-1] == 1:
        return a[..., 0]
    return BT601[0] * a[..., 0] + BT601[1] * a[..., 1] + BT601[2] * a[..., 2]


def quantize8(img: np.ndarray) -> np.ndarray:
    """Snap values to the 8-bit grid (k / 255), staying in float64."""
    a = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(a * 255.0 + 0.5), 0.0, 255.0) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(a * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def bilinear_downsample(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resize with edge-centered (half-pixel) bilinear sampling.

    Preserves constants; target equal to the source shape is the identity.
    """
    out_h, out_w = int(target[0]), int(target[1])
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target dimensions must be >= 1, got {(out_h, out_w)}")
    a = np.asarray(img, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    out = kernels.resize_bilinear(a, out_h, out_w)
    return out[:, :, 0] if squeeze else out


def shannon_entropy(img: np.ndarray) -> float:
    """Entropy in bits of the 256-bin histogram of 8-bit quantized luminance.

    Lies in [0, 8]; constant images give exactly 0.
    """
    hist = kernels.luminance_hist(np.asarray(img, dtype=np.float64))
    total = int(hist.sum())
    p = hist[hist > 0] / total
    return float(-(p * np.log2(p)).sum()) + 0.0  # + 0.0 folds -0.0 into 0.0


def min_max_normalize(scores) -> np.ndarray:
    """Affine map of a sequence onto [0, 1]; a degenerate range maps to zeros."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValidationError("cannot normalize an empty sequence")
    lo = s.min()
    hi = s.max()
    if hi == lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give float('inf')."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel1d(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _windowed_mean(a: np.ndarray, kern: np.ndarray) -> np.ndarray:
    half = (len(kern) - 1) // 2
    out = correlate1d(a, kern, axis=0, mode="constant")
    out = correlate1d(out, kern, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on luminance, 11x11 Gaussian window (sigma 1.5), K1/K2 = 0.01/0.03."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs {y.shape}")
    lx = luminance(x)
    ly = luminance(y)
    if min(lx.shape) < SSIM_WINDOW:
        raise ValidationError(
            f"image {lx.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    kern = _gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = _windowed_mean(lx, kern)
    mu_y = _windowed_mean(ly, kern)
    xx = _windowed_mean(lx * lx, kern)
    yy = _windowed_mean(ly * ly, kern)
    xy = _windowed_mean(lx * ly, kern)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def crop_patches(img: np.ndarray, size: int, n: int, seed: int) -> list[np.ndarray]:
    """n random size x size crops, deterministic given the seed."""
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[0], a.shape[1]
    if size < 1 or size > min(h, w):
        raise ValidationError(f"patch size {size} invalid for image {a.shape}")
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(int(n)):
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        patches.append(a[y : y + size, x : x + size].copy())
    return patches
