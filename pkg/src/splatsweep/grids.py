"""Shared grid containers: images, features, cost/probability volumes, depth maps.

Images and features are (H, W, C) float arrays; per-pixel distributions over
M depth hypotheses are (H, W, M).  Grids use float64 throughout so the
gradient checks and determinism contracts hold without a mixed-precision
story.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def as_image(arr) -> np.ndarray:
    """Coerce (H, W) or (H, W, C) input to a float64 (H, W, C) image."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.size == 0:
        raise ValueError(f"expected a non-empty (H, W[, C]) grid, got shape {a.shape}")
    return a


def downsample_area(image: np.ndarray, factor: int) -> np.ndarray:
    """Block-average an (H, W, C) image by an integer factor."""
    img = as_image(image)
    if factor == 1:
        return img.copy()
    H, W, C = img.shape
    if H % factor or W % factor:
        raise ValueError(f"image size {W}x{H} not divisible by {factor}")
    return img.reshape(H // factor, factor, W // factor, factor, C).mean(axis=(1, 3))


@dataclass
class FeatureGrid:
    """(H, W, C) per-pixel feature channels at one cascade stage."""

    values: np.ndarray
    stage: int = 1

    def __post_init__(self):
        self.values = as_image(self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class CostVolume:
    """(H, W, M) matching cost per pixel per depth hypothesis, with validity."""

    cost: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.cost.ndim != 3 or self.cost.shape != self.validity.shape:
            raise ValueError("cost and validity must share an (H, W, M) shape")
        if np.any(self.cost < 0):
            raise ValueError("cost must be non-negative")


@dataclass
class ProbabilityVolume:
    """Per-pixel softmax distribution over M depth hypotheses.

    logits are retained pre-softmax for the analytic gradient checks;
    validity marks hypotheses whose warped samples were usable.
    """

    prob: np.ndarray
    logits: np.ndarray
    validity: np.ndarray = None

    def __post_init__(self):
        self.prob = np.asarray(self.prob, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.prob.shape != self.logits.shape or self.prob.ndim != 3:
            raise ValueError("prob and logits must share an (H, W, M) shape")
        if self.validity is None:
            self.validity = np.ones(self.prob.shape, dtype=bool)
        else:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != self.prob.shape:
                raise ValueError("validity shape mismatch")

    @property
    def num_hypotheses(self) -> int:
        return self.prob.shape[2]

    def validate(self, tol: float = 1e-6):
        if np.any(self.prob < 0):
            raise ValueError("probabilities must be non-negative")
        sums = self.prob.sum(axis=2)
        if np.abs(sums - 1.0).max() > tol:
            raise ValueError("per-pixel probabilities must sum to 1")


def softmax_over_hypotheses(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last (hypothesis) axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(prob: np.ndarray, grad_prob: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = (grad_prob * prob).sum(axis=-1, keepdims=True)
    return prob * (grad_prob - inner)


@dataclass
class DepthMap:
    """(H, W) per-pixel depth with a binary validity mask.

    Unmasked entries are forced to 0 and must never be read by consumers.
    """

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.depth.shape != self.mask.shape or self.depth.ndim != 2:
            raise ValueError("depth and mask must share an (H, W) shape")
        self.depth = np.where(self.mask, self.depth, 0.0)

    @property
    def shape(self):
        return self.depth.shape
