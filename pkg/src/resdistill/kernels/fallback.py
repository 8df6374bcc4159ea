"""Pure-numpy twins of the compiled kernels.

Kept bit-compatible with ``resdistill.kernels._core``: identical per-element
float64 expressions, identical accumulation order for splats (np.add.at is
unbuffered and applies deposits in array order, matching the C loop).
"""

from __future__ import annotations

import math

import numpy as np


def _axis_plan(src_len: int, out_len: int):
    s = (np.arange(out_len, dtype=np.float64) + 0.5) * (src_len / out_len) - 0.5
    s = np.clip(s, 0.0, src_len - 1)
    i0 = np.floor(s).astype(np.intp)
    frac = s - i0
    i1 = np.minimum(i0 + 1, src_len - 1)
    return i0, i1, frac


def resize_bilinear(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Edge-centered bilinear resize of an H x W x C float64 array."""
    s = np.ascontiguousarray(src, dtype=np.float64)
    h, w = s.shape[0], s.shape[1]
    y0, y1, fy = _axis_plan(h, out_h)
    x0, x1, fx = _axis_plan(w, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = (1.0 - fx) * s[np.ix_(y0, x0)] + fx * s[np.ix_(y0, x1)]
    bot = (1.0 - fx) * s[np.ix_(y1, x0)] + fx * s[np.ix_(y1, x1)]
    return (1.0 - fy) * top + fy * bot


def luminance_hist(img: np.ndarray) -> np.ndarray:
    """256-bin histogram of 8-bit quantized BT.601 luminance."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        y = a
    else:
        y = 0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2]
    bins = np.floor(y * 255.0 + 0.5).astype(np.int64)
    np.clip(bins, 0, 255, out=bins)
    return np.bincount(bins.ravel(), minlength=256).astype(np.int64)


def add_line_segments(field, x0s, y0s, x1s, y1s, amps):
    """Additively rasterize anti-aliased line segments into a 2-D field, in place."""
    h, w = field.shape
    for x0, y0, x1, y1, amp in zip(
        np.asarray(x0s, dtype=np.float64),
        np.asarray(y0s, dtype=np.float64),
        np.asarray(x1s, dtype=np.float64),
        np.asarray(y1s, dtype=np.float64),
        np.asarray(amps, dtype=np.float64),
    ):
        dx = x1 - x0
        dy = y1 - y0
        length = math.sqrt(dx * dx + dy * dy)
        n = max(2, int(math.ceil(length * 2.0)) + 1)
        step = 1.0 / (n - 1)
        dep = amp * length / n
        t = np.arange(n, dtype=np.float64) * step
        x = x0 + t * dx
        y = y0 + t * dy
        xi = np.floor(x).astype(np.intp)
        yi = np.floor(y).astype(np.intp)
        fx = x - xi
        fy = y - yi
        # 4 corners per sample, same order as the C loop: (y,x), (y,x+1), (y+1,x), (y+1,x+1)
        ys = np.stack([yi, yi, yi + 1, yi + 1], axis=1).ravel()
        xs = np.stack([xi, xi + 1, xi, xi + 1], axis=1).ravel()
        ws = np.stack(
            [(1.0 - fy) * (1.0 - fx) * dep, (1.0 - fy) * fx * dep,
             fy * (1.0 - fx) * dep, fy * fx * dep],
            axis=1,
        ).ravel()
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        np.add.at(field, (ys[ok], xs[ok]), ws[ok])
    return field
