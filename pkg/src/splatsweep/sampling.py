"""Per-pixel depth hypothesis generation.

Three samplers: uniform (baseline), adaptive bins driven by externally
supplied normalized bin widths (coarse stage), and entropy-adaptive Gaussian
sampling around a previous depth estimate (fine stages).  Bin widths are a
per-pixel partition of [0, 1]; hypothesis j sits at the center of bin j
mapped into the pixel's depth window:

    d_j = lo + (hi - lo) * (b_j / 2 + sum_{i<j} b_i)

so narrow bins mean densely packed hypotheses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .grids import DepthMap, ProbabilityVolume

WIDTH_SUM_TOL = 1e-6


@dataclass
class DepthHypothesisGrid:
    """(H, W, M) ordered depth candidates for one cascade stage.

    range_lo/range_hi are the per-pixel sampling windows; widths are the
    normalized bin widths when a bin-based sampler produced the grid, and
    fallback marks pixels that lost their previous-depth anchor and were
    resampled uniformly over the full range.
    """

    depths: np.ndarray
    stage: int
    range_lo: np.ndarray
    range_hi: np.ndarray
    widths: np.ndarray | None = None
    fallback: np.ndarray | None = None

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 3:
            raise ValueError(f"depths must be (H, W, M), got shape {self.depths.shape}")
        H, W, _ = self.depths.shape
        self.range_lo = np.broadcast_to(np.asarray(self.range_lo, dtype=np.float64), (H, W)).copy()
        self.range_hi = np.broadcast_to(np.asarray(self.range_hi, dtype=np.float64), (H, W)).copy()

    @property
    def num_hypotheses(self) -> int:
        return self.depths.shape[2]

    @property
    def shape(self):
        return self.depths.shape[:2]

    def validate(self):
        if self.depths.shape[2] > 1 and np.any(np.diff(self.depths, axis=2) <= 0):
            raise ValueError("per-pixel depths must be strictly increasing")
        if np.any(self.depths < self.range_lo[:, :, None]) or np.any(
            self.depths > self.range_hi[:, :, None]
        ):
            raise ValueError("depths must stay inside the per-pixel range")
        if self.widths is not None:
            if np.any(self.widths <= 0):
                raise ValueError("bin widths must be strictly positive")
            if np.abs(self.widths.sum(axis=2) - 1.0).max() > WIDTH_SUM_TOL:
                raise ValueError("per-pixel bin widths must sum to 1")


@dataclass
class UncertaintyMap:
    """(H, W) Shannon entropy of a probability volume, in nats."""

    entropy: np.ndarray

    def __post_init__(self):
        self.entropy = np.asarray(self.entropy, dtype=np.float64)
        if self.entropy.ndim != 2:
            raise ValueError("entropy must be (H, W)")


def uniform_hypotheses(lo: float, hi: float, num: int, shape, stage: int = 1) -> DepthHypothesisGrid:
    """Endpoint-inclusive evenly spaced depths, identical across pixels.

    num == 1 degenerates to the midpoint (lo + hi) / 2.
    """
    _check_range(lo, hi, num)
    H, W = shape
    if num == 1:
        values = np.array([(lo + hi) / 2.0])
    else:
        values = np.linspace(lo, hi, num)
    depths = np.broadcast_to(values, (H, W, num)).copy()
    return DepthHypothesisGrid(depths, stage, np.full((H, W), lo), np.full((H, W), hi))


def adaptive_bins_hypotheses(
    widths: np.ndarray, lo: float, hi: float, stage: int = 1
) -> DepthHypothesisGrid:
    """Place one hypothesis at the center of each per-pixel bin.

    widths: (H, W, M) strictly positive, per-pixel sum 1 within 1e-6; they
    are renormalized exactly before use so the centers stay inside (lo, hi).
    """
    widths = np.asarray(widths, dtype=np.float64)
    if widths.ndim != 3:
        raise ValueError(f"widths must be (H, W, M), got shape {widths.shape}")
    _check_range(lo, hi, widths.shape[2])
    if np.any(widths <= 0):
        raise ValueError("bin widths must be strictly positive")
    sums = widths.sum(axis=2, keepdims=True)
    if np.abs(sums - 1.0).max() > WIDTH_SUM_TOL:
        raise ValueError("per-pixel bin widths must sum to 1 within 1e-6")
    widths = widths / sums
    H, W, _ = widths.shape
    lo_grid = np.full((H, W), float(lo))
    hi_grid = np.full((H, W), float(hi))
    depths = bin_centers(widths, lo_grid, hi_grid)
    return DepthHypothesisGrid(depths, stage, lo_grid, hi_grid, widths=widths)


def bin_centers(widths: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Map normalized bin widths to depth values over per-pixel windows."""
    cum = np.cumsum(widths, axis=2)
    before = np.concatenate([np.zeros_like(cum[:, :, :1]), cum[:, :, :-1]], axis=2)
    span = (hi - lo)[:, :, None]
    return lo[:, :, None] + span * (widths / 2.0 + before)


def entropy_map(volume: ProbabilityVolume) -> UncertaintyMap:
    """Per-pixel Shannon entropy of the hypothesis distribution, 0*log(0) := 0."""
    volume.validate()
    p = volume.prob
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return UncertaintyMap(-terms.sum(axis=2))


def gaussian_bin_widths(entropy: np.ndarray, num: int) -> np.ndarray:
    """Equal-mass bin widths of a standard normal truncated to [-(1+E), 1+E].

    Uniform sampling in CDF space puts bin boundaries at equal probability
    mass, so widths are narrowest at the center and grow outward; a larger
    entropy widens the truncation interval and with it the outer bins.
    Returns (H, W, num) widths normalized to sum to 1.
    """
    a = 1.0 + np.asarray(entropy, dtype=np.float64)
    cdf_lo = ndtr(-a)[:, :, None]
    cdf_hi = ndtr(a)[:, :, None]
    steps = np.arange(num + 1, dtype=np.float64) / num
    quantiles = cdf_lo + (cdf_hi - cdf_lo) * steps
    t = ndtri(quantiles)  # (H, W, num+1)
    spans = t[:, :, -1:] - t[:, :, :1]
    return np.diff(t, axis=2) / spans


def adaptive_gaussian_hypotheses(
    prev_depth: DepthMap,
    uncertainty: UncertaintyMap,
    stage_range: float,
    num: int,
    global_lo: float,
    global_hi: float,
    stage: int = 2,
) -> DepthHypothesisGrid:
    """Sample depths around a previous estimate, packed Gaussian-dense at its value.

    The window [prev - R/2, prev + R/2] is clamped into the global range;
    pixels without a usable previous depth fall back to uniform bins over
    the full global range and are flagged in the output's fallback mask.
    """
    _check_range(global_lo, global_hi, num)
    if stage_range <= 0:
        raise ValueError(f"stage_range must be positive, got {stage_range}")
    prev = prev_depth.depth
    if uncertainty.entropy.shape != prev.shape:
        raise ValueError("entropy and previous depth shapes differ")
    ok = prev_depth.mask & np.isfinite(prev) & (prev >= global_lo) & (prev <= global_hi)
    widths = gaussian_bin_widths(uncertainty.entropy, num)
    half = stage_range / 2.0
    lo_w = np.clip(prev - half, global_lo, global_hi)
    hi_w = np.clip(prev + half, global_lo, global_hi)
    fallback = ~ok
    lo_w = np.where(ok, lo_w, global_lo)
    hi_w = np.where(ok, hi_w, global_hi)
    widths = np.where(ok[:, :, None], widths, 1.0 / num)
    depths = bin_centers(widths, lo_w, hi_w)
    return DepthHypothesisGrid(
        depths, stage, lo_w, hi_w, widths=widths, fallback=fallback
    )


def _check_range(lo: float, hi: float, num: int):
    if num < 1:
        raise ValueError(f"need at least one hypothesis, got {num}")
    if not (0.0 < lo < hi):
        raise ValueError(f"need 0 < lo < hi, got [{lo}, {hi}]")
