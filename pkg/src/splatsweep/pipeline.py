"""Three-stage coarse-to-fine cascade, logit-space refinement, depth-map
fusion and point-cloud metrics.

Stage 1 samples the full depth range with adaptive bins whose widths come
from local feature variance; stages 2 and 3 sample entropy-adaptive Gaussian
windows around the upsampled previous depth with shrinking spans.  Every
stage regresses a reference depth, synthesizes source depths by probability
splatting, renders images in both directions and scores the unsupervised
loss suite.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraParams, backproject_grid, pixel_grid, project_points, scale_camera
from .cost import (
    aggregate_variance,
    build_feature_volume,
    extract_features,
    regress_depth,
    regularize_to_probability,
)
from .filters import box_mean
from .grids import DepthMap, FeatureGrid, ProbabilityVolume, as_image, downsample_area
from .losses import (
    LossBreakdown,
    LossWeights,
    ObjectiveConfig,
    build_stage_inputs,
    descent_objective,
    stage_losses,
)
from .sampling import (
    DepthHypothesisGrid,
    UncertaintyMap,
    adaptive_bins_hypotheses,
    adaptive_gaussian_hypotheses,
    entropy_map,
    uniform_hypotheses,
)
from .splatting import SplatConfig

SAMPLERS = ("uniform", "adaptive_bins", "adaptive_gaussian")


@dataclass
class StageConfig:
    """One cascade stage: resolution scale, hypothesis count and sampler."""

    scale: float
    num_hypotheses: int
    sampler: str
    window_ratio: float | None = None  # fraction of the global range
    temperature: float = 0.005
    smoothing_radius: int = 1

    def __post_init__(self):
        if self.scale not in (0.25, 0.5, 1.0):
            raise ValueError(f"scale must be 1/4, 1/2 or 1, got {self.scale}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.num_hypotheses < 1:
            raise ValueError("need at least one hypothesis")

    @property
    def stage_index(self) -> int:
        return {0.25: 1, 0.5: 2, 1.0: 3}[self.scale]


def default_stage_configs() -> list:
    """M = (48, 32, 8) over scales (1/4, 1/2, 1); bins then Gaussian sampling."""
    return [
        StageConfig(0.25, 48, "adaptive_bins", None, temperature=0.005, smoothing_radius=1),
        StageConfig(0.5, 32, "adaptive_gaussian", 0.25, temperature=0.005, smoothing_radius=1),
        StageConfig(1.0, 8, "adaptive_gaussian", 0.0625, temperature=0.005, smoothing_radius=1),
    ]


def feature_variance_bin_widths(ref_feat: FeatureGrid, num: int, gain: float = 8.0) -> np.ndarray:
    """Default coarse-stage bin-width provider.

    Local luminance variance, pushed through a unit-temperature softmax over
    per-bin scores that penalize off-center bins proportionally to the
    variance: texture-rich pixels get wider central bins, textureless pixels
    stay uniform.
    """
    lum = ref_feat.values[:, :, 0]
    local_var = np.clip(box_mean(lum * lum, 1, (0, 1)) - box_mean(lum, 1, (0, 1)) ** 2, 0.0, None)
    centers = np.arange(num, dtype=np.float64) - (num - 1) / 2.0
    centers /= max(num - 1, 1)  # in [-1/2, 1/2]
    scores = -gain * local_var[:, :, None] * (4.0 * centers**2)
    e = np.exp(scores - scores.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


def upsample_nearest(a: np.ndarray, factor: int = 2) -> np.ndarray:
    """Nearest-neighbor upsampling (no value invention across depth edges)."""
    return np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)


@dataclass
class StageResult:
    stage_index: int
    hyps: DepthHypothesisGrid
    prob: ProbabilityVolume
    depth: DepthMap
    entropy: UncertaintyMap
    synthetic_src_depths: list
    rendered_src: list  # (image, mask) per source
    rendered_ref: list
    smoothed_ref: np.ndarray
    images: list  # stage-resolution images, reference first
    cams: list
    loss: "object"


@dataclass
class CascadeResult:
    stages: list
    losses: LossBreakdown

    @property
    def final_depth(self) -> DepthMap:
        return self.stages[-1].depth


def run_cascade(
    views,
    stage_configs=None,
    weights: LossWeights = None,
    splat_cfg: SplatConfig = None,
    threads: int = 1,
) -> CascadeResult:
    """Run the coarse-to-fine cascade; the first view is the reference.

    views: list of (image, CameraParams) at full resolution.  threads only
    distributes per-source-view work (feature volumes, splats); outputs are
    merged in view order, so results are independent of the worker count.
    """
    if len(views) < 2:
        raise ValueError("need a reference view plus at least one source view")
    stage_configs = stage_configs or default_stage_configs()
    weights = weights or LossWeights()
    splat_cfg = splat_cfg or SplatConfig()
    images = [as_image(img) for img, _ in views]
    cams = [cam for _, cam in views]
    H, W = images[0].shape[:2]
    if H % 4 or W % 4:
        raise ValueError(f"image size {W}x{H} must be divisible by 4")
    for img, cam in zip(images, cams):
        if img.shape[:2] != (H, W):
            raise ValueError("all views must share one resolution")
        if (cam.image_width, cam.image_height) != (W, H):
            raise ValueError("camera size does not match its image")
    global_lo = cams[0].depth_min
    global_hi = cams[0].depth_max

    stages = []
    prev_depth = None
    prev_entropy = None
    prev_scale = None
    for cfg in stage_configs:
        factor = {0.25: 4, 0.5: 2, 1.0: 1}[cfg.scale]
        stage_idx = cfg.stage_index
        with _pool(threads) as pool:
            feats = list(pool.map(lambda im: extract_features(im, stage_idx), images))
        cams_s = [scale_camera(c, cfg.scale) for c in cams]
        imgs_s = [downsample_area(im, factor) for im in images]
        shape_s = imgs_s[0].shape[:2]

        if cfg.sampler == "uniform":
            hyps = uniform_hypotheses(global_lo, global_hi, cfg.num_hypotheses, shape_s, stage_idx)
        elif cfg.sampler == "adaptive_bins":
            widths = feature_variance_bin_widths(feats[0], cfg.num_hypotheses)
            hyps = adaptive_bins_hypotheses(widths, global_lo, global_hi, stage_idx)
        else:
            if prev_depth is None:
                raise ValueError("adaptive_gaussian needs a previous stage")
            up = int(round(cfg.scale / prev_scale))
            prev_up = DepthMap(
                upsample_nearest(prev_depth.depth, up), upsample_nearest(prev_depth.mask, up)
            )
            ent_up = UncertaintyMap(upsample_nearest(prev_entropy.entropy, up))
            span = (cfg.window_ratio or 0.25) * (global_hi - global_lo)
            hyps = adaptive_gaussian_hypotheses(
                prev_up, ent_up, span, cfg.num_hypotheses, global_lo, global_hi, stage_idx
            )

        ref_cam = cams_s[0]
        with _pool(threads) as pool:
            volumes = list(
                pool.map(
                    lambda i: build_feature_volume(ref_cam, cams_s[i], feats[i], hyps),
                    range(1, len(views)),
                )
            )
        cost = aggregate_variance(feats[0], volumes, hyps)
        prob = regularize_to_probability(cost, cfg.temperature, cfg.smoothing_radius)
        inputs = build_stage_inputs(imgs_s, cams_s, prob, hyps, splat_cfg)
        loss = stage_losses(inputs)
        ent = entropy_map(prob)
        stages.append(
            StageResult(
                stage_index=stage_idx,
                hyps=hyps,
                prob=prob,
                depth=inputs.ref_depth,
                entropy=ent,
                synthetic_src_depths=inputs.synthetic_src_depths,
                rendered_src=inputs.rendered_src,
                rendered_ref=inputs.rendered_ref,
                smoothed_ref=inputs.smoothed_ref,
                images=imgs_s,
                cams=cams_s,
                loss=loss,
            )
        )
        prev_depth = inputs.ref_depth
        prev_entropy = ent
        prev_scale = cfg.scale
    return CascadeResult(stages, LossBreakdown([s.loss for s in stages], weights))


class _pool:
    """ThreadPoolExecutor wrapper that degrades to serial map for 1 worker."""

    def __init__(self, threads: int):
        self.threads = max(1, int(threads))
        self._pool = None

    def __enter__(self):
        if self.threads > 1:
            self._pool = ThreadPoolExecutor(max_workers=self.threads)
            return self._pool
        return self

    def map(self, fn, it):
        return map(fn, it)

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
        return False


@dataclass
class RefineResult:
    depth: DepthMap
    logits: np.ndarray
    trace: list
    converged: bool


def refine_depth_by_descent(
    initial: ProbabilityVolume,
    views,
    hyps: DepthHypothesisGrid,
    weights: LossWeights,
    steps: int,
    step_size: float,
    splat_cfg: SplatConfig = None,
    include_consistency: bool = False,
) -> RefineResult:
    """Gradient descent on per-pixel logits under the unsupervised objective.

    Backtracking line search keeps the loss trace non-increasing; if a step
    cannot decrease the loss after exhausting backtracks the run halts with
    the partial trace.  steps=0 returns the initial regression unchanged.
    The smoothness guidance image is frozen from the initial state.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if step_size <= 0:
        raise ValueError("step_size must be positive")
    splat_cfg = splat_cfg or SplatConfig()
    images = [as_image(img) for img, _ in views]
    cams = [cam for _, cam in views]
    if steps == 0:
        return RefineResult(regress_depth(initial, hyps), initial.logits.copy(), [], True)
    guidance = build_stage_inputs(images, cams, initial, hyps, splat_cfg).smoothed_ref
    objective = ObjectiveConfig(
        images=images,
        cams=cams,
        hyps=hyps,
        splat_cfg=splat_cfg,
        weights=weights,
        guidance=guidance,
        include_consistency=include_consistency,
    )
    logits = initial.logits.copy()
    value, grad, _ = descent_objective(logits, objective)
    trace = [value]
    lr = step_size
    converged = True
    for _ in range(steps):
        accepted = False
        for _ in range(40):
            candidate = logits - lr * grad
            cand_value, _, _ = descent_objective(candidate, objective, want_grad=False)
            if cand_value <= value:
                accepted = True
                break
            lr /= 2.0
        if not accepted:
            converged = False
            break
        logits = candidate
        value = cand_value
        _, grad, _ = descent_objective(logits, objective)
        trace.append(value)
        lr = min(lr * 1.5, step_size * 8.0)
    from .grids import softmax_over_hypotheses

    prob = softmax_over_hypotheses(logits)
    final = ProbabilityVolume(prob, logits, initial.validity)
    return RefineResult(regress_depth(final, hyps), logits, trace, converged)


# ---------------------------------------------------------------------------
# fusion and evaluation
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) world units
    colors: np.ndarray = None  # optional (N, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if self.colors.shape[0] != self.points.shape[0]:
                raise ValueError("need one color per point")

    def __len__(self):
        return self.points.shape[0]


def fuse_point_cloud(
    depth_maps,
    cams,
    min_views: int = 2,
    reproj_px: float = 1.0,
    rel_depth_tol: float = 0.01,
    images=None,
) -> PointCloud:
    """Geometric-consistency fusion of per-view depth maps.

    A pixel survives when at least min_views other views agree with it: the
    round trip through the other view's depth lands within reproj_px pixels
    and the depth gap is below rel_depth_tol relative.  Survivors are
    back-projected at their own depth; every view takes a turn as reference.
    """
    if not depth_maps or len(depth_maps) != len(cams):
        raise ValueError("need aligned, non-empty depth map and camera lists")
    if min_views < 1:
        raise ValueError("min_views must be >= 1")
    all_points = []
    all_colors = []
    n_views = len(depth_maps)
    for r in range(n_views):
        dm = depth_maps[r]
        mask = dm.mask
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        depths_r = dm.depth[ys, xs]
        world = backproject_grid(cams[r], dm.depth, mask)
        agree = np.zeros(world.shape[0], dtype=np.int64)
        for s in range(n_views):
            if s == r:
                continue
            agree += _consistent(
                world, xs, ys, depths_r, cams[r], depth_maps[s], cams[s], reproj_px, rel_depth_tol
            )
        keep = agree >= min_views if n_views > 1 else np.ones(world.shape[0], bool)
        all_points.append(world[keep])
        if images is not None:
            img = as_image(images[r])
            gray = img[ys, xs].mean(axis=1)
            rgb = np.clip(gray[keep] * 255.0, 0, 255).astype(np.uint8)
            all_colors.append(np.stack([rgb, rgb, rgb], axis=1))
    if not all_points:
        return PointCloud(np.zeros((0, 3)), None)
    points = np.concatenate(all_points, axis=0)
    colors = np.concatenate(all_colors, axis=0) if all_colors else None
    return PointCloud(points, colors)


def _consistent(world, xs, ys, depths_r, cam_r, dm_s, cam_s, reproj_px, rel_tol):
    """Round-trip agreement of reference points against one other view."""
    xy, z, in_front = project_points(cam_s, world)
    w, h = cam_s.image_width, cam_s.image_height
    qx = np.round(xy[:, 0]).astype(np.intp)
    qy = np.round(xy[:, 1]).astype(np.intp)
    inb = in_front & (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
    qxc = np.clip(qx, 0, w - 1)
    qyc = np.clip(qy, 0, h - 1)
    d_s = dm_s.depth[qyc, qxc]
    valid = inb & dm_s.mask[qyc, qxc] & (d_s > 0)
    # back-project the other view's stored depth and return to the reference
    pix = np.stack([qxc.astype(np.float64), qyc.astype(np.float64), np.ones_like(d_s)], axis=1)
    rays = pix @ np.linalg.inv(cam_s.intrinsics).T
    p_cam = rays * d_s[:, None]
    back_world = (p_cam - cam_s.translation) @ cam_s.rotation
    xy_r, z_r, front_r = project_points(cam_r, back_world)
    err_px = np.hypot(xy_r[:, 0] - xs, xy_r[:, 1] - ys)
    rel = np.abs(z_r - depths_r) / np.maximum(depths_r, 1e-12)
    return (valid & front_r & (err_px < reproj_px) & (rel < rel_tol)).astype(np.int64)


def evaluate_acc_comp(recon: PointCloud, gt: PointCloud, max_dist: float):
    """Mean nearest-neighbor distances, clamped at max_dist.

    accuracy: recon -> gt, completeness: gt -> recon, overall: their mean.
    """
    if len(recon) == 0 or len(gt) == 0:
        raise ValueError("point clouds must be non-empty")
    if max_dist <= 0:
        raise ValueError("max_dist must be positive")
    d_rg = cKDTree(gt.points).query(recon.points)[0]
    d_gr = cKDTree(recon.points).query(gt.points)[0]
    acc = float(np.minimum(d_rg, max_dist).mean())
    comp = float(np.minimum(d_gr, max_dist).mean())
    return acc, comp, (acc + comp) / 2.0


def gt_point_cloud(views) -> PointCloud:
    """Union of the back-projected ground-truth depths of all views."""
    pts = [
        backproject_grid(v.cam, v.depth.depth, v.depth.mask)
        for v in views
        if v.depth.mask.any()
    ]
    if not pts:
        raise ValueError("no masked ground-truth pixels")
    return PointCloud(np.concatenate(pts, axis=0))
