"""Separable triangle-filter (bilinear) resampling weights.

The weights reproduce Pillow's ``Image.BILINEAR`` resampling: when
shrinking, the triangle kernel is widened by the scale factor so every
source pixel contributes (antialiasing); when enlarging it reduces to
ordinary bilinear interpolation on half-pixel centres.
"""

from functools import lru_cache

import numpy as np


def _triangle(x):
    x = np.abs(x)
    return np.where(x < 1.0, 1.0 - x, 0.0)


@lru_cache(maxsize=64)
def _matrix64(in_size, out_size):
    if in_size <= 0 or out_size <= 0:
        raise ValueError(f"sizes must be positive, got {in_size} -> {out_size}")
    scale = in_size / out_size
    filterscale = max(scale, 1.0)
    support = filterscale
    m = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) * scale
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), in_size)
        xs = np.arange(lo, hi)
        w = _triangle((xs - center + 0.5) / filterscale)
        total = w.sum()
        if total > 0:
            m[i, lo:hi] = w / total
    m.setflags(write=False)
    return m


def resample_matrix(in_size, out_size, dtype=np.float32):
    """Return the ``(out_size, in_size)`` row-stochastic resampling matrix."""
    return _matrix64(int(in_size), int(out_size)).astype(dtype)


def resample(array, out_h, out_w):
    """Resize an ``(..., H, W, C)`` array along its two spatial axes."""
    a = np.asarray(array)
    h, w = a.shape[-3], a.shape[-2]
    if (h, w) == (out_h, out_w):
        return a.copy()
    dtype = a.dtype if a.dtype in (np.float32, np.float64) else np.float32
    mh = resample_matrix(h, out_h, dtype)
    mw = resample_matrix(w, out_w, dtype)
    tmp = np.einsum("ih,...hwc->...iwc", mh, a.astype(dtype, copy=False), optimize=True)
    return np.einsum("jw,...iwc->...ijc", mw, tmp, optimize=True)
