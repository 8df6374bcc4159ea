# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pixel kernels: bilinear resampling, luminance histograms, streak rasterization.

The pure-python twin lives in ``resdistill.kernels.fallback`` and must stay
bit-compatible: both backends evaluate the same per-element expressions in
float64, so outputs agree exactly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor, sqrt

cnp.import_array()


def resize_bilinear(cnp.ndarray src, int out_h, int out_w):
    """Edge-centered bilinear resize of an H x W x C float64 array."""
    cdef cnp.ndarray[cnp.float64_t, ndim=3] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef int h = s.shape[0]
    cdef int w = s.shape[1]
    cdef int c = s.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty((out_h, out_w, c), dtype=np.float64)
    cdef double sy_scale = <double> h / out_h
    cdef double sx_scale = <double> w / out_w
    cdef int i, j, k, y0, y1, x0, x1
    cdef double sy, sx, fy, fx

    for i in range(out_h):
        sy = (i + 0.5) * sy_scale - 0.5
        if sy < 0.0:
            sy = 0.0
        if sy > h - 1:
            sy = h - 1
        y0 = <int> floor(sy)
        fy = sy - y0
        y1 = y0 + 1
        if y1 > h - 1:
            y1 = h - 1
        for j in range(out_w):
            sx = (j + 0.5) * sx_scale - 0.5
            if sx < 0.0:
                sx = 0.0
            if sx > w - 1:
                sx = w - 1
            x0 = <int> floor(sx)
            fx = sx - x0
            x1 = x0 + 1
            if x1 > w - 1:
                x1 = w - 1
            for k in range(c):
                out[i, j, k] = (1.0 - fy) * ((1.0 - fx) * s[y0, x0, k] + fx * s[y0, x1, k]) \
                    + fy * ((1.0 - fx) * s[y1, x0, k] + fx * s[y1, x1, k])
    return out


def luminance_hist(cnp.ndarray img):
    """256-bin histogram of 8-bit quantized BT.601 luminance.

    Accepts H x W (gray) or H x W x 3 (RGB) float64 arrays in [0, 1].
    Quantization is floor(y * 255 + 0.5), clamped to [0, 255].
    """
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hist = np.zeros(256, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g
    cdef cnp.ndarray[cnp.float64_t, ndim=3] rgb
    cdef int h, w, i, j, b
    cdef double y

    if img.ndim == 2:
        g = np.ascontiguousarray(img, dtype=np.float64)
        h = g.shape[0]
        w = g.shape[1]
        for i in range(h):
            for j in range(w):
                b = <int> floor(g[i, j] * 255.0 + 0.5)
                if b < 0:
                    b = 0
                if b > 255:
                    b = 255
                hist[b] += 1
    else:
        rgb = np.ascontiguousarray(img, dtype=np.float64)
        h = rgb.shape[0]
        w = rgb.shape[1]
        for i in range(h):
            for j in range(w):
                y = 0.299 * rgb[i, j, 0] + 0.587 * rgb[i, j, 1] + 0.114 * rgb[i, j, 2]
                b = <int> floor(y * 255.0 + 0.5)
                if b < 0:
                    b = 0
                if b > 255:
                    b = 255
                hist[b] += 1
    return hist


def add_line_segments(cnp.ndarray field,
                      cnp.ndarray x0s, cnp.ndarray y0s,
                      cnp.ndarray x1s, cnp.ndarray y1s,
                      cnp.ndarray amps):
    """Additively rasterize anti-aliased line segments into a 2-D field, in place.

    Each segment is sampled at ~2 points per pixel of length; every sample
    bilinearly splats amp * length / n_samples onto its 4 neighbours.
    Out-of-bounds deposits are dropped.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] f = field
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ax0 = np.ascontiguousarray(x0s, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ay0 = np.ascontiguousarray(y0s, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ax1 = np.ascontiguousarray(x1s, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ay1 = np.ascontiguousarray(y1s, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] aa = np.ascontiguousarray(amps, dtype=np.float64)
    cdef int h = f.shape[0]
    cdef int w = f.shape[1]
    cdef int nseg = ax0.shape[0]
    cdef int s, i, n, xi, yi
    cdef double dx, dy, length, step, t, x, y, fx, fy, dep

    for s in range(nseg):
        dx = ax1[s] - ax0[s]
        dy = ay1[s] - ay0[s]
        length = sqrt(dx * dx + dy * dy)
        n = <int> ceil(length * 2.0) + 1
        if n < 2:
            n = 2
        step = 1.0 / (n - 1)
        dep = aa[s] * length / n
        for i in range(n):
            t = i * step
            x = ax0[s] + t * dx
            y = ay0[s] + t * dy
            xi = <int> floor(x)
            yi = <int> floor(y)
            fx = x - xi
            fy = y - yi
            if 0 <= yi < h and 0 <= xi < w:
                f[yi, xi] += (1.0 - fy) * (1.0 - fx) * dep
            if 0 <= yi < h and 0 <= xi + 1 < w:
                f[yi, xi + 1] += (1.0 - fy) * fx * dep
            if 0 <= yi + 1 < h and 0 <= xi < w:
                f[yi + 1, xi] += fy * (1.0 - fx) * dep
            if 0 <= yi + 1 < h and 0 <= xi + 1 < w:
                f[yi + 1, xi + 1] += fy * fx * dep
    return field
