"""Separable box filtering with edge-truncated windows.

Windows that stick out of the array are truncated and normalized by the
in-bounds count, so constants are preserved (up to rounding) everywhere
including borders.  The normalized mean operator is needed both forward
(feature extraction, cost smoothing, SSIM statistics) and as its adjoint
(SSIM gradients), so both directions live here.
"""

from __future__ import annotations

import numpy as np


def box_sum_axis(a: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Truncated moving-window sum of width 2*radius+1 along one axis."""
    if radius <= 0:
        return a.copy()
    n = a.shape[axis]
    csum = np.cumsum(a, axis=axis)
    zero_shape = list(a.shape)
    zero_shape[axis] = 1
    csum = np.concatenate([np.zeros(zero_shape, dtype=a.dtype), csum], axis=axis)
    idx = np.arange(n)
    hi = np.minimum(idx + radius, n - 1) + 1
    lo = np.maximum(idx - radius, 0)
    return np.take(csum, hi, axis=axis) - np.take(csum, lo, axis=axis)


def window_counts(n: int, radius: int) -> np.ndarray:
    """In-bounds window sizes along an axis of length n."""
    idx = np.arange(n)
    return (np.minimum(idx + radius, n - 1) - np.maximum(idx - radius, 0) + 1).astype(np.float64)


def box_mean(a: np.ndarray, radius: int, axes) -> np.ndarray:
    """Count-normalized box mean over the given axes."""
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    out = np.asarray(a, dtype=np.float64)
    if radius == 0:
        return out.copy()
    for axis in axes:
        out = box_sum_axis(out, radius, axis)
        cnt_shape = [1] * out.ndim
        cnt_shape[axis] = out.shape[axis]
        out = out / window_counts(out.shape[axis], radius).reshape(cnt_shape)
    return out


def box_mean_adjoint(g: np.ndarray, radius: int, axes) -> np.ndarray:
    """Adjoint of box_mean: pulls a gradient back through the normalized mean.

    Per axis the mean is diag(1/count) @ box_sum with a symmetric box_sum,
    so the adjoint divides by the counts first and box-sums after.
    """
    out = np.asarray(g, dtype=np.float64)
    if radius == 0:
        return out.copy()
    for axis in axes:
        cnt_shape = [1] * out.ndim
        cnt_shape[axis] = out.shape[axis]
        out = out / window_counts(out.shape[axis], radius).reshape(cnt_shape)
        out = box_sum_axis(out, radius, axis)
    return out
