"""Plane-sweep cost volume construction and depth regression.

Pipeline per stage: hand-crafted features, per-source warped feature volumes
(Eq.-style homography warp realized as project-after-backproject), variance
aggregation across views, a smoothing+softmax regularizer standing in for a
learned one, and probability-weighted depth regression.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraParams, warp_grid
from .filters import box_mean
from .grids import (
    CostVolume,
    DepthMap,
    FeatureGrid,
    ProbabilityVolume,
    as_image,
    downsample_area,
    softmax_over_hypotheses,
)
from .sampling import DepthHypothesisGrid

# Logit assigned to hypotheses whose warped sample was unusable; finite so a
# pixel with no valid hypothesis still softmaxes to a (masked-out) uniform row.
INVALID_LOGIT = -1e6

STAGE_FACTORS = {1: 4, 2: 2, 3: 1}

# Rec. 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


def extract_features(image, stage: int) -> FeatureGrid:
    """Deterministic multi-scale features: luminance, its x/y central-difference
    gradients, and a 3x3 local mean, at the stage's resolution (1/4, 1/2, 1).
    """
    img = as_image(image)
    factor = _stage_factor(stage)
    img = downsample_area(img, factor)
    if img.shape[2] == 3:
        lum = img @ _LUMA
    elif img.shape[2] == 1:
        lum = img[:, :, 0]
    else:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[2]}")
    gy, gx = np.gradient(lum)
    local_mean = box_mean(lum, 1, axes=(0, 1))
    return FeatureGrid(np.stack([lum, gx, gy, local_mean], axis=-1), stage=stage)


def build_feature_volume(
    ref: CameraParams,
    src: CameraParams,
    src_feat: FeatureGrid,
    hyps: DepthHypothesisGrid,
):
    """Warp source features to every reference hypothesis.

    Returns (volume (H, W, M, C), validity (H, W, M)).  Entry (p, j) is the
    bilinear sample of the source features at the projection of reference
    pixel p at depth d_j(p); samples that land outside the source image or
    behind the source camera are zeroed and flagged invalid.
    """
    H, W, M = hyps.depths.shape
    Hf, Wf, C = src_feat.shape
    if (Hf, Wf) != (H, W):
        raise ValueError(f"feature grid {Wf}x{Hf} does not match hypothesis grid {W}x{H}")
    if (ref.image_width, ref.image_height) != (W, H) or (
        src.image_width,
        src.image_height,
    ) != (Wf, Hf):
        raise ValueError("camera resolutions must be pre-scaled to the stage resolution")
    x, y, _, in_front = warp_grid(ref, src, hyps.depths)
    inside = (x >= 0.0) & (x <= Wf - 1.0) & (y >= 0.0) & (y <= Hf - 1.0)
    valid = in_front & inside
    sampled = bilinear_sample(src_feat.values, x, y)
    sampled[~valid] = 0.0
    return sampled, valid


def bilinear_sample(values: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear gather from an (H, W, C) grid at continuous (x, y) positions.

    The 4-neighborhood is clamped at the borders; callers are responsible for
    masking coordinates outside the image rectangle.
    """
    H, W, C = values.shape
    x0 = np.clip(np.floor(x), 0, max(W - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = np.clip(x - x0, 0.0, 1.0)[..., None]
    fy = np.clip(y - y0, 0.0, 1.0)[..., None]
    flat = values.reshape(-1, C)
    v00 = flat[y0 * W + x0]
    v10 = flat[y0 * W + x1]
    v01 = flat[y1 * W + x0]
    v11 = flat[y1 * W + x1]
    top = v00 * (1.0 - fx) + v10 * fx
    bot = v01 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


def aggregate_variance(
    ref_feat: FeatureGrid,
    warped,
    hyps: DepthHypothesisGrid,
    view_ids=None,
) -> CostVolume:
    """Variance of the N per-view feature volumes, reduced to a scalar cost.

    warped: list of (volume, validity) pairs from build_feature_volume, one
    per source view.  The reference features broadcast across hypotheses.
    When view_ids is given the inputs are summed in ascending id order so the
    result is bit-identical under input permutation.
    """
    if len(warped) < 1:
        raise ValueError("variance aggregation needs at least 2 views in total")
    if view_ids is not None:
        order = np.argsort(np.asarray(view_ids), kind="stable")
        warped = [warped[i] for i in order]
    H, W, M = hyps.depths.shape
    C = ref_feat.shape[2]
    num_views = len(warped) + 1
    ref = ref_feat.values[:, :, None, :]  # (H, W, 1, C)
    for vol, val in warped:
        if vol.shape != (H, W, M, C) or val.shape != (H, W, M):
            raise ValueError("warped volume shape mismatch")
    total = ref * np.ones((1, 1, M, 1))
    for vol, _ in warped:
        total = total + vol
    mean = total / num_views
    sq = (ref - mean) ** 2
    for vol, _ in warped:
        sq = sq + (vol - mean) ** 2
    variance = sq / num_views
    cost = variance.mean(axis=3)
    validity = np.ones((H, W, M), dtype=bool)
    for _, val in warped:
        validity &= val
    return CostVolume(cost, validity)


def regularize_to_probability(
    cost: CostVolume, temperature: float = 1.0, smoothing_radius: int = 0
) -> ProbabilityVolume:
    """Box-smooth the cost along x, y and the hypothesis axis, then softmax.

    Stand-in for a learned cost regularizer: logits are the negated smoothed
    cost over the temperature; invalid entries get a -1e6 logit so they carry
    no mass unless the whole pixel is invalid (which yields a uniform,
    masked-out row instead of NaN).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if smoothing_radius < 0:
        raise ValueError(f"smoothing_radius must be >= 0, got {smoothing_radius}")
    smoothed = box_mean(cost.cost, smoothing_radius, axes=(0, 1, 2))
    logits = -smoothed / temperature
    logits[~cost.validity] = INVALID_LOGIT
    prob = softmax_over_hypotheses(logits)
    return ProbabilityVolume(prob, logits, cost.validity)


def regress_depth(volume: ProbabilityVolume, hyps: DepthHypothesisGrid) -> DepthMap:
    """Probability-weighted mean of the depth hypotheses per pixel.

    A pixel is masked valid when at least one of its hypotheses was valid.
    """
    if volume.prob.shape != hyps.depths.shape:
        raise ValueError(
            f"probability {volume.prob.shape} and hypotheses {hyps.depths.shape} disagree"
        )
    depth = (volume.prob * hyps.depths).sum(axis=2)
    mask = volume.validity.any(axis=2)
    return DepthMap(depth, mask)


def regress_depth_grad_logits(
    volume: ProbabilityVolume, hyps: DepthHypothesisGrid
) -> np.ndarray:
    """d(regressed depth)/d(logits): P * (d - depth) per pixel and hypothesis."""
    depth = (volume.prob * hyps.depths).sum(axis=2, keepdims=True)
    return volume.prob * (hyps.depths - depth)


def _stage_factor(stage: int) -> int:
    if stage not in STAGE_FACTORS:
        raise ValueError(f"stage must be one of {sorted(STAGE_FACTORS)}, got {stage}")
    return STAGE_FACTORS[stage]
