"""Forward splatting from the reference view into source views.

A projected sub-pixel location scatters its payload onto the 4 surrounding
integer pixels with bilinear coefficients (the inverse of bilinear
interpolation).  Three payloads ride the same kernel: probability-weighted
depth hypotheses (synthetic source depth), image colors (cross-view
rendering) and projected depths (consistency checks).

Accumulation order contract: contributions accumulate in reference-pixel
raster order, then hypothesis order, then the fixed corner order
(TL, TR, BL, BR).  Parallel callers must merge per-worker partial
accumulators in worker-index order; this implementation keeps one canonical
serial accumulation pass, so results are independent of worker count by
construction.  Behind-camera projections are skipped silently (occlusion
geometry makes them routine); out-of-image corners are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraParams, warp_grid, warp_grid_with_ddepth
from .grids import DepthMap, ProbabilityVolume, as_image
from .sampling import DepthHypothesisGrid


@dataclass
class SplatConfig:
    """Splatting knobs: mask threshold tau and denominator stabilizer epsilon.

    The optional soft z-test discounts a contribution's weight by
    exp(-((d' - d'_min) / z_sigma)^2) against the front-most depth landing on
    the same pixel; off by default to match plain probability-weighted
    averaging.
    """

    tau: float = 0.001
    epsilon: float = 1e-8
    soft_z_test: bool = False
    z_sigma: float = 0.5

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.z_sigma <= 0:
            raise ValueError(f"z_sigma must be positive, got {self.z_sigma}")


def splat_weights(subpixel, width: int, height: int):
    """Bilinear splat coefficients of one continuous position.

    Returns a list of ((x, y), weight) over the in-bounds pixels among the 4
    surrounding integer neighbors; positions entirely outside the image give
    an empty list.  Interior positions have weights summing to exactly 1.
    """
    x, y = float(subpixel[0]), float(subpixel[1])
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    corners = [
        ((x0, y0), (1.0 - fx) * (1.0 - fy)),
        ((x0 + 1.0, y0), fx * (1.0 - fy)),
        ((x0, y0 + 1.0), (1.0 - fx) * fy),
        ((x0 + 1.0, y0 + 1.0), fx * fy),
    ]
    out = []
    for (cx, cy), w in corners:
        if 0 <= cx <= width - 1 and 0 <= cy <= height - 1:
            out.append(((int(cx), int(cy)), w))
    return out


class SplatContext:
    """One scatter pass plus everything the analytic gradients need to replay it.

    Contribution arrays are flat (K,) in canonical order; per-corner arrays
    are (4K,) with the corner index nested innermost.
    """

    def __init__(self, idx, coeff, dcoeff_dx, dcoeff_dy, weight, payload,
                 weight_sum, value_sum, out, mask, shape, fx, fy):
        self.idx = idx
        self.coeff = coeff
        self.dcoeff_dx = dcoeff_dx
        self.dcoeff_dy = dcoeff_dy
        self.weight = weight
        self.payload = payload
        self.weight_sum = weight_sum
        self.value_sum = value_sum
        self.out = out
        self.mask = mask
        self.shape = shape
        self.fx = fx  # (K,) fractional offsets of each contribution
        self.fy = fy
        self.dpos = None  # (dx/dd, dy/dd, dz/dd) for depth-positioned passes


def _corner_pieces(x, y, weight, width, height):
    """Per-corner indices, bilinear coefficients and their x/y derivatives.

    Corners outside the image and contributions with zero weight are zeroed
    out (their clamped index receives an exact 0.0, leaving sums bitwise
    unchanged).
    """
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    gx = 1.0 - fx
    gy = 1.0 - fy
    coeff = np.stack([gx * gy, fx * gy, gx * fy, fx * fy], axis=1)
    dcx = np.stack([-gy, gy, -fy, fy], axis=1)
    dcy = np.stack([-gx, -fx, gx, fx], axis=1)
    cx = np.stack([x0f, x0f + 1.0, x0f, x0f + 1.0], axis=1)
    cy = np.stack([y0f, y0f, y0f + 1.0, y0f + 1.0], axis=1)
    live = (
        (cx >= 0.0) & (cx <= width - 1.0) & (cy >= 0.0) & (cy <= height - 1.0)
        & (weight[:, None] != 0.0)
    )
    cxi = np.clip(cx, 0, width - 1).astype(np.intp)
    cyi = np.clip(cy, 0, height - 1).astype(np.intp)
    idx = (cyi * width + cxi).reshape(-1)
    coeff = np.where(live, coeff, 0.0).reshape(-1)
    dcx = np.where(live, dcx, 0.0).reshape(-1)
    dcy = np.where(live, dcy, 0.0).reshape(-1)
    return idx, coeff, dcx, dcy, fx, fy


def _scatter(x, y, weight, payload, width, height, cfg: SplatConfig) -> SplatContext:
    """Canonical-order scatter-accumulate of (K,) contributions with (K, P) payloads."""
    if cfg.soft_z_test:
        weight = _soft_z_discount(x, y, weight, payload[:, 0], width, height, cfg)
    idx, coeff, dcx, dcy, fx, fy = _corner_pieces(x, y, weight, width, height)
    w4 = np.repeat(weight, 4)
    wc = coeff * w4
    pay4 = np.repeat(payload, 4, axis=0)
    num = width * height
    weight_sum = np.zeros(num, dtype=np.float64)
    np.add.at(weight_sum, idx, wc)
    value_sum = np.zeros((num, payload.shape[1]), dtype=np.float64)
    np.add.at(value_sum, idx, wc[:, None] * pay4)
    mask = weight_sum > cfg.tau
    out = np.where(mask[:, None], value_sum / (weight_sum + cfg.epsilon)[:, None], 0.0)
    return SplatContext(
        idx, coeff, dcx, dcy, weight, payload,
        weight_sum, value_sum, out, mask, (height, width), fx, fy,
    )


def _soft_z_discount(x, y, weight, depth, width, height, cfg: SplatConfig):
    """Occlusion-aware weight discount against the front-most depth per pixel."""
    idx, coeff, _, _, _, _ = _corner_pieces(x, y, weight, width, height)
    zmin = np.full(width * height, np.inf)
    z4 = np.where(coeff * np.repeat(weight, 4) > 0.0, np.repeat(depth, 4), np.inf)
    np.minimum.at(zmin, idx, z4)
    front = zmin[idx].reshape(-1, 4).min(axis=1)
    front = np.where(np.isfinite(front), front, depth)
    rel = (depth - front) / cfg.z_sigma
    return weight * np.exp(-rel * rel)


def synthesize_source_depth(
    volume: ProbabilityVolume,
    hyps: DepthHypothesisGrid,
    ref: CameraParams,
    src: CameraParams,
    cfg: SplatConfig,
) -> DepthMap:
    """Splat the probability volume into a source view as a synthetic depth map.

    Every (reference pixel, hypothesis) pair projects into the source view
    and scatters (projected depth * probability, probability) onto its 4
    neighbors; a source pixel keeps the probability-weighted mean depth when
    its accumulated probability mass exceeds tau.
    """
    ctx = synthesize_context(volume, hyps, ref, src, cfg)
    H, W = ctx.shape
    return DepthMap(ctx.out[:, 0].reshape(H, W), ctx.mask.reshape(H, W))


def synthesize_context(volume, hyps, ref, src, cfg) -> SplatContext:
    """Forward pass of synthesize_source_depth keeping the scatter context."""
    H, W, M = hyps.depths.shape
    if volume.prob.shape != (H, W, M):
        raise ValueError("probability volume and hypothesis grid shapes differ")
    _check_scale(ref, src, W, H)
    x, y, z, in_front = warp_grid(ref, src, hyps.depths)
    w = np.where(in_front, volume.prob, 0.0).reshape(-1)
    ctx = _scatter(x.reshape(-1), y.reshape(-1), w, z.reshape(-1, 1), W, H, cfg)
    ctx.in_front = in_front
    return ctx


def synthesize_vjp(ctx: SplatContext, cfg: SplatConfig, grad_depth: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the synthetic depth map back to the probabilities.

    The positions and projected depths are fixed by the hypotheses, so the
    synthetic depth is a rational function of the probabilities alone:
    d out(q) / d w(p,j) = coeff * (d'(p,j) - out(q)) / (weight_sum(q) + eps)
    on masked pixels.  Returns an (H, W, M) gradient.
    """
    H, W = ctx.shape
    gbar = np.where(ctx.mask, grad_depth.reshape(-1), 0.0)
    denom = ctx.weight_sum + cfg.epsilon
    d4 = np.repeat(ctx.payload[:, 0], 4)
    per_corner = ctx.coeff * (d4 - ctx.out[ctx.idx, 0]) / denom[ctx.idx] * gbar[ctx.idx]
    grad_w = per_corner.reshape(-1, 4).sum(axis=1)
    grad = grad_w.reshape(ctx.in_front.shape)
    return np.where(ctx.in_front, grad, 0.0)


def render_view(
    image,
    depth: DepthMap,
    cam_from: CameraParams,
    cam_to: CameraParams,
    cfg: SplatConfig,
):
    """Splat an image into another view at the given per-pixel depths.

    Only masked-valid depth pixels contribute.  Returns the rendered
    (H, W, C) image and its coverage mask ([weight sum > tau]).
    """
    ctx = render_context(image, depth, cam_from, cam_to, cfg)
    H, W = ctx.shape
    return ctx.out.reshape(H, W, -1), ctx.mask.reshape(H, W)


def render_context(image, depth, cam_from, cam_to, cfg, depth_payload=False) -> SplatContext:
    """Forward pass of render_view keeping the scatter context.

    With depth_payload=True the splatted payload is the projected depth
    itself (the consistency-check direction) instead of the image colors.
    """
    img = as_image(image)
    H, W, C = img.shape
    if depth.shape != (H, W):
        raise ValueError("depth map and image shapes differ")
    _check_scale(cam_from, cam_to, W, H)
    x, y, z, in_front, dx_dd, dy_dd, dz_dd = warp_grid_with_ddepth(
        cam_from, cam_to, depth.depth
    )
    live = in_front & depth.mask
    w = live.astype(np.float64).reshape(-1)
    payload = z.reshape(-1, 1) if depth_payload else img.reshape(-1, C)
    ctx = _scatter(x.reshape(-1), y.reshape(-1), w, payload, W, H, cfg)
    ctx.dpos = (dx_dd.reshape(-1), dy_dd.reshape(-1), dz_dd.reshape(-1))
    ctx.depth_payload = depth_payload
    return ctx


def render_vjp(ctx: SplatContext, cfg: SplatConfig, grad_out: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the rendered output back to the positioning depths.

    grad_out: (H, W, C) upstream gradient on the rendered image (or (H, W)
    on a depth payload).  Positions move with the depth map, so the chain is
    through the bilinear coefficients; a depth payload adds the direct
    payload derivative.  Returns (H, W) gradients w.r.t. the depth map.
    """
    H, W = ctx.shape
    C = ctx.payload.shape[1]
    gbar = np.where(ctx.mask[:, None], grad_out.reshape(-1, C), 0.0)
    denom = ctx.weight_sum + cfg.epsilon
    # u_c = sum_ch gbar(q,ch) (payload(p,ch) - out(q,ch)) / denom(q)
    pay4 = np.repeat(ctx.payload, 4, axis=0)
    resid = pay4 - ctx.out[ctx.idx]
    u = (gbar[ctx.idx] * resid).sum(axis=1) / denom[ctx.idx]
    w4 = np.repeat(ctx.weight, 4)
    gx = (u * ctx.dcoeff_dx * w4).reshape(-1, 4).sum(axis=1)
    gy = (u * ctx.dcoeff_dy * w4).reshape(-1, 4).sum(axis=1)
    dx_dd, dy_dd, dz_dd = ctx.dpos
    grad_depth = gx * dx_dd + gy * dy_dd
    if getattr(ctx, "depth_payload", False):
        # payload d'(p) itself moves with the depth: out gains wc/denom * dz_dd
        direct = (gbar[ctx.idx, 0] * ctx.coeff * w4 / denom[ctx.idx]).reshape(-1, 4).sum(axis=1)
        grad_depth = grad_depth + direct * dz_dd
    return grad_depth.reshape(H, W)


def render_source_image(
    ref_image, ref_depth: DepthMap, ref: CameraParams, src: CameraParams, cfg: SplatConfig
):
    """Render the source view from the reference image at the regressed depth."""
    return render_view(ref_image, ref_depth, ref, src, cfg)


def render_reference_image(
    src_image, src_depth: DepthMap, src: CameraParams, ref: CameraParams, cfg: SplatConfig
):
    """Render the reference view from a source image at its synthetic depth.

    Source pixels with an invalid synthetic depth contribute nothing, so the
    output mask is zero wherever only such pixels would have landed.
    """
    return render_view(src_image, src_depth, src, ref, cfg)


def splat_projected_depth(
    ref_depth: DepthMap, cam_from: CameraParams, cam_to: CameraParams, cfg: SplatConfig
) -> DepthMap:
    """Forward-splat a depth map's own projected depths into another view."""
    H, W = ref_depth.shape
    dummy = np.zeros((H, W, 1))
    ctx = render_context(dummy, ref_depth, cam_from, cam_to, cfg, depth_payload=True)
    return DepthMap(ctx.out[:, 0].reshape(H, W), ctx.mask.reshape(H, W))


def smooth_reference_image(ref_image, rendered_refs, masks):
    """Blend the reference image with the mean of its rendered counterparts.

    Output is 0.5 * I + 0.5 * (masked mean of the rendered reference images);
    pixels covered by no rendering keep the original value.
    """
    img = as_image(ref_image)
    if len(rendered_refs) != len(masks):
        raise ValueError("need one mask per rendered image")
    num = np.zeros_like(img)
    den = np.zeros(img.shape[:2], dtype=np.float64)
    for rendered, mask in zip(rendered_refs, masks):
        r = as_image(rendered)
        if r.shape != img.shape or mask.shape != img.shape[:2]:
            raise ValueError("rendered image or mask shape mismatch")
        m = mask.astype(np.float64)
        num += r * m[:, :, None]
        den += m
    covered = den > 0.0
    blend = np.where(covered[:, :, None], num / np.maximum(den, 1.0)[:, :, None], img)
    return np.where(covered[:, :, None], 0.5 * img + 0.5 * blend, img)


def _check_scale(cam_a: CameraParams, cam_b: CameraParams, width: int, height: int):
    if (cam_a.image_width, cam_a.image_height) != (width, height) or (
        cam_b.image_width,
        cam_b.image_height,
    ) != (width, height):
        raise ValueError("cameras must be pre-scaled to the grid resolution")
