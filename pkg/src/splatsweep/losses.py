"""Unsupervised objective: photometric + SSIM match costs in both view
directions, edge-aware depth smoothness against the smoothed reference, and
cross-view depth consistency.

Every term is a mean over masked pixels (not a sum) so the loss weights stay
resolution-independent.  Image gradients are forward differences with the
last row/column excluded from the means, and a difference enters a mean only
when both of its samples are masked.

The module also carries hand-derived reverse-mode gradients for the chain
logits -> probabilities -> regressed/synthetic depths -> splat renderings ->
losses, which power the gradient-descent refinement demo and the finite-
difference validation harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraParams
from .cost import regress_depth
from .filters import box_mean, box_mean_adjoint
from .grids import (
    DepthMap,
    ProbabilityVolume,
    as_image,
    softmax_over_hypotheses,
    softmax_vjp,
)
from .sampling import DepthHypothesisGrid
from .splatting import (
    SplatConfig,
    render_context,
    render_vjp,
    smooth_reference_image,
    synthesize_context,
    synthesize_vjp,
)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_RADIUS = 1  # 3x3 uniform window


@dataclass
class LossWeights:
    """Multipliers for the four loss terms (photometric, SSIM, smoothness,
    consistency)."""

    photometric: float = 12.0
    ssim: float = 6.0
    smoothness: float = 0.05
    consistency: float = 0.01

    def __post_init__(self):
        for name in ("photometric", "ssim", "smoothness", "consistency"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class MaskedLoss:
    """A loss value plus a flag marking that its mask was empty."""

    value: float
    empty: bool = False


@dataclass
class StageLoss:
    """Unweighted loss components of one cascade stage."""

    photometric: float
    ssim: float
    smoothness: float
    consistency: float
    empty_photometric: bool = False
    empty_consistency: bool = False

    def weighted(self, weights: LossWeights) -> float:
        return (
            weights.photometric * self.photometric
            + weights.ssim * self.ssim
            + weights.smoothness * self.smoothness
            + weights.consistency * self.consistency
        )


@dataclass
class LossBreakdown:
    """Per-stage components and the weighted total over all stages."""

    stages: list
    weights: LossWeights
    photometric: float = field(init=False)
    ssim: float = field(init=False)
    smoothness: float = field(init=False)
    consistency: float = field(init=False)
    total: float = field(init=False)

    def __post_init__(self):
        self.photometric = sum(s.photometric for s in self.stages)
        self.ssim = sum(s.ssim for s in self.stages)
        self.smoothness = sum(s.smoothness for s in self.stages)
        self.consistency = sum(s.consistency for s in self.stages)
        self.total = sum(s.weighted(self.weights) for s in self.stages)

    def to_metrics(self) -> dict:
        """Flat key/value view for the metrics file."""
        out = {}
        for k, s in enumerate(self.stages, start=1):
            out[f"stage{k}.photometric"] = s.photometric
            out[f"stage{k}.ssim"] = s.ssim
            out[f"stage{k}.smoothness"] = s.smoothness
            out[f"stage{k}.consistency"] = s.consistency
            out[f"stage{k}.weighted"] = s.weighted(self.weights)
        out["total"] = self.total
        return out


# ---------------------------------------------------------------------------
# photometric / SSIM / smoothness / consistency terms
# ---------------------------------------------------------------------------


def _forward_diff_x(a):
    return a[:, 1:] - a[:, :-1]


def _forward_diff_y(a):
    return a[1:, :] - a[:-1, :]


def _masked_mean(values, mask):
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0
    return float(values[mask].sum() / count), count


def photometric_loss(rendered, real, mask, select=None) -> MaskedLoss:
    """L1 intensity difference plus L1 forward-difference gradient difference.

    Both terms are means over masked pixels (channel-averaged); a gradient
    difference requires both its samples masked.  select optionally narrows
    the evaluated pixels (used by the gradient checks to stay off kinks).
    """
    value, _, empty = _photometric_with_grad(rendered, real, mask, select, want_grad=False)
    return MaskedLoss(value, empty)


def _photometric_with_grad(rendered, real, mask, select=None, want_grad=True):
    r = as_image(rendered)
    t = as_image(real)
    if r.shape != t.shape or mask.shape != r.shape[:2]:
        raise ValueError("rendered/real/mask shapes disagree")
    m = mask if select is None else (mask & select)
    C = r.shape[2]
    grad = np.zeros_like(r) if want_grad else None

    diff = r - t
    abs_px = np.abs(diff).mean(axis=2)
    int_term, int_count = _masked_mean(abs_px, m)
    if want_grad and int_count:
        grad += np.sign(diff) * (m[:, :, None] / (int_count * C))

    gterm = 0.0
    mx = m[:, 1:] & m[:, :-1]
    dx = _forward_diff_x(r) - _forward_diff_x(t)
    tx, cx = _masked_mean(np.abs(dx).mean(axis=2), mx)
    gterm += tx
    if want_grad and cx:
        s = np.sign(dx) * (mx[:, :, None] / (cx * C))
        grad[:, 1:] += s
        grad[:, :-1] -= s
    my = m[1:, :] & m[:-1, :]
    dy = _forward_diff_y(r) - _forward_diff_y(t)
    ty, cy = _masked_mean(np.abs(dy).mean(axis=2), my)
    gterm += ty
    if want_grad and cy:
        s = np.sign(dy) * (my[:, :, None] / (cy * C))
        grad[1:, :] += s
        grad[:-1, :] -= s

    empty = int_count == 0
    return int_term + gterm, grad, empty


def ssim_loss(rendered, real, mask, select=None) -> float:
    """1 - masked mean of single-scale SSIM (3x3 uniform window)."""
    value, _ = _ssim_with_grad(rendered, real, mask, select, want_grad=False)
    return value


def _ssim_stats(x, y):
    m1 = box_mean(x, SSIM_RADIUS, axes=(0, 1))
    m2 = box_mean(y, SSIM_RADIUS, axes=(0, 1))
    e1 = box_mean(x * x, SSIM_RADIUS, axes=(0, 1))
    e2 = box_mean(y * y, SSIM_RADIUS, axes=(0, 1))
    e12 = box_mean(x * y, SSIM_RADIUS, axes=(0, 1))
    a1 = 2.0 * m1 * m2 + SSIM_C1
    a2 = 2.0 * (e12 - m1 * m2) + SSIM_C2
    b1 = m1 * m1 + m2 * m2 + SSIM_C1
    b2 = (e1 - m1 * m1) + (e2 - m2 * m2) + SSIM_C2
    return m1, m2, a1, a2, b1, b2


def _ssim_with_grad(rendered, real, mask, select=None, want_grad=True):
    r = as_image(rendered)
    t = as_image(real)
    if r.shape != t.shape or mask.shape != r.shape[:2]:
        raise ValueError("rendered/real/mask shapes disagree")
    m = mask if select is None else (mask & select)
    count = int(m.sum())
    if count == 0:
        return 0.0, np.zeros_like(r) if want_grad else None
    C = r.shape[2]
    grad = np.zeros_like(r) if want_grad else None
    total = 0.0
    for c in range(C):
        x, y = r[:, :, c], t[:, :, c]
        m1, m2, a1, a2, b1, b2 = _ssim_stats(x, y)
        s = (a1 * a2) / (b1 * b2)
        total += float(s[m].sum() / count)
        if want_grad:
            gs = -m.astype(np.float64) / (count * C)  # dL/ds, L = 1 - mean s
            ds_dm1 = (2.0 * m2 * (a2 - a1)) / (b1 * b2) - 2.0 * m1 * s * (1.0 / b1 - 1.0 / b2)
            ds_de1 = -s / b2
            ds_de12 = 2.0 * a1 / (b1 * b2)
            grad_c = box_mean_adjoint(gs * ds_dm1, SSIM_RADIUS, axes=(0, 1))
            grad_c += 2.0 * x * box_mean_adjoint(gs * ds_de1, SSIM_RADIUS, axes=(0, 1))
            grad_c += y * box_mean_adjoint(gs * ds_de12, SSIM_RADIUS, axes=(0, 1))
            grad[:, :, c] = grad_c
    return 1.0 - total / C, grad


def depth_smoothness_loss(depth: DepthMap, smooth_ref) -> float:
    """Edge-aware first-order depth smoothness against a guidance image.

    mean over masked interior pixels of exp(-|grad_x I|) |grad_x D| plus the
    y-direction term; the guidance gradient magnitude is channel-averaged.
    """
    value, _ = _smoothness_with_grad(depth, smooth_ref, want_grad=False)
    return value


def smoothness_weights(guidance):
    """exp(-|forward difference|) edge weights of a guidance image."""
    g = as_image(guidance)
    wx = np.exp(-np.abs(_forward_diff_x(g)).mean(axis=2))
    wy = np.exp(-np.abs(_forward_diff_y(g)).mean(axis=2))
    return wx, wy


def smoothness_penalty_maps(depth: DepthMap, guidance):
    """Per-position smoothness penalties and their validity masks.

    Returns (px, mx, py, my): the x/y penalty grids exp(-|grad I|)|grad D|
    and the both-samples-masked position masks that feed the loss means.
    """
    g = as_image(guidance)
    if g.shape[:2] != depth.shape:
        raise ValueError("depth and guidance shapes disagree")
    wx, wy = smoothness_weights(g)
    dx = np.abs(_forward_diff_x(depth.depth))
    dy = np.abs(_forward_diff_y(depth.depth))
    mx = depth.mask[:, 1:] & depth.mask[:, :-1]
    my = depth.mask[1:, :] & depth.mask[:-1, :]
    return wx * dx, mx, wy * dy, my


def _smoothness_with_grad(depth: DepthMap, guidance, want_grad=True):
    g = as_image(guidance)
    if g.shape[:2] != depth.shape:
        raise ValueError("depth and guidance shapes disagree")
    wx, wy = smoothness_weights(g)
    d = depth.depth
    grad = np.zeros_like(d) if want_grad else None
    dx = _forward_diff_x(d)
    mx = depth.mask[:, 1:] & depth.mask[:, :-1]
    tx, cx = _masked_mean(wx * np.abs(dx), mx)
    if want_grad and cx:
        s = wx * np.sign(dx) * mx / cx
        grad[:, 1:] += s
        grad[:, :-1] -= s
    dy = _forward_diff_y(d)
    my = depth.mask[1:, :] & depth.mask[:-1, :]
    ty, cy = _masked_mean(wy * np.abs(dy), my)
    if want_grad and cy:
        s = wy * np.sign(dy) * my / cy
        grad[1:, :] += s
        grad[:-1, :] -= s
    return tx + ty, grad


def depth_consistency_loss(
    ref_depth: DepthMap,
    synthetic_src,
    ref: CameraParams,
    srcs,
    cfg: SplatConfig,
) -> MaskedLoss:
    """Mean L1 gap between the reference depth splatted into each source view
    and that view's synthetic depth, averaged over source views.

    Views whose projected/synthetic masks do not intersect contribute 0 and
    set the empty flag.
    """
    from .splatting import splat_projected_depth

    if len(synthetic_src) == 0 or len(synthetic_src) != len(srcs):
        raise ValueError("need one synthetic depth per source view")
    total = 0.0
    any_empty = False
    for synth, src in zip(synthetic_src, srcs):
        projected = splat_projected_depth(ref_depth, ref, src, cfg)
        inter = projected.mask & synth.mask
        if not inter.any():
            any_empty = True
            continue
        total += float(np.abs(projected.depth - synth.depth)[inter].mean())
    return MaskedLoss(total / len(synthetic_src), any_empty)


# ---------------------------------------------------------------------------
# Eq.-style stage assembly
# ---------------------------------------------------------------------------


@dataclass
class StageLossInputs:
    """Everything needed to evaluate one stage's loss terms."""

    ref_image: np.ndarray
    src_images: list
    rendered_src: list  # (image, mask) per source view
    rendered_ref: list  # (image, mask) per source view
    smoothed_ref: np.ndarray
    ref_depth: DepthMap
    synthetic_src_depths: list
    ref_cam: CameraParams = None
    src_cams: list = None
    splat_cfg: SplatConfig = None


def stage_losses(inputs: StageLossInputs) -> StageLoss:
    """Evaluate the four loss components of one stage."""
    n_src = len(inputs.src_images)
    if n_src == 0:
        raise ValueError("need at least one source view")
    pc = 0.0
    ss = 0.0
    empty_pc = False
    for i in range(n_src):
        img_s, mask_s = inputs.rendered_src[i]
        term = photometric_loss(img_s, inputs.src_images[i], mask_s)
        pc += term.value
        empty_pc |= term.empty
        ss += ssim_loss(img_s, inputs.src_images[i], mask_s)
        img_r, mask_r = inputs.rendered_ref[i]
        term = photometric_loss(img_r, inputs.ref_image, mask_r)
        pc += term.value
        empty_pc |= term.empty
        ss += ssim_loss(img_r, inputs.ref_image, mask_r)
    ds = depth_smoothness_loss(inputs.ref_depth, inputs.smoothed_ref)
    if inputs.ref_cam is not None and inputs.src_cams:
        dc = depth_consistency_loss(
            inputs.ref_depth,
            inputs.synthetic_src_depths,
            inputs.ref_cam,
            inputs.src_cams,
            inputs.splat_cfg,
        )
        dc_value, dc_empty = dc.value, dc.empty
    else:
        dc_value, dc_empty = 0.0, True
    return StageLoss(pc, ss, ds, dc_value, empty_pc, dc_empty)


def total_loss(stage_inputs, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the per-stage losses over up to three stages."""
    if not stage_inputs:
        raise ValueError("need at least one stage")
    return LossBreakdown([stage_losses(s) for s in stage_inputs], weights)


# ---------------------------------------------------------------------------
# differentiable objective for logit-space descent
# ---------------------------------------------------------------------------


@dataclass
class ObjectiveConfig:
    """Scene bundle for the descent objective: first image/camera is the reference."""

    images: list
    cams: list
    hyps: DepthHypothesisGrid
    splat_cfg: SplatConfig
    weights: LossWeights
    guidance: np.ndarray = None  # frozen smoothness guidance; default ref image
    include_consistency: bool = False
    select: np.ndarray = None  # optional pixel restriction for gradient checks

    def __post_init__(self):
        if len(self.images) < 2 or len(self.images) != len(self.cams):
            raise ValueError("need a reference plus at least one source view")
        self.images = [as_image(im) for im in self.images]
        if self.guidance is None:
            self.guidance = self.images[0]


def descent_objective(logits: np.ndarray, objective: ObjectiveConfig, want_grad=True):
    """Value and analytic gradient of the refinement objective w.r.t. logits.

    Covers the photometric + SSIM terms in both view directions, the
    smoothness term against a frozen guidance image, and (optionally) the
    depth-consistency term.  Masks are treated as locally constant, which is
    exact away from the mask/kink margins enforced by the gradient checks.
    """
    cfg = objective.splat_cfg
    weights = objective.weights
    hyps = objective.hyps
    ref_img = objective.images[0]
    ref_cam = objective.cams[0]
    sel = objective.select

    prob = softmax_over_hypotheses(logits)
    volume = ProbabilityVolume(prob, logits)
    ref_depth = regress_depth(volume, hyps)

    grad_p = np.zeros_like(prob) if want_grad else None
    grad_dr = np.zeros(ref_depth.shape) if want_grad else None

    pc_total = 0.0
    ssim_total = 0.0
    dc_total = 0.0
    n_src = len(objective.images) - 1
    for i in range(1, len(objective.images)):
        src_img = objective.images[i]
        src_cam = objective.cams[i]

        ctx_rs = render_context(ref_img, ref_depth, ref_cam, src_cam, cfg)
        H, W = ctx_rs.shape
        rendered_src = ctx_rs.out.reshape(H, W, -1)
        mask_src = ctx_rs.mask.reshape(H, W)
        pc, g_pc, _ = _photometric_with_grad(rendered_src, src_img, mask_src, sel, want_grad)
        ss, g_ss = _ssim_with_grad(rendered_src, src_img, mask_src, sel, want_grad)
        pc_total += pc
        ssim_total += ss
        if want_grad:
            upstream = weights.photometric * g_pc + weights.ssim * g_ss
            grad_dr += render_vjp(ctx_rs, cfg, upstream)

        ctx_syn = synthesize_context(volume, hyps, ref_cam, src_cam, cfg)
        synth = DepthMap(ctx_syn.out[:, 0].reshape(H, W), ctx_syn.mask.reshape(H, W))
        ctx_rr = render_context(src_img, synth, src_cam, ref_cam, cfg)
        rendered_ref = ctx_rr.out.reshape(H, W, -1)
        mask_ref = ctx_rr.mask.reshape(H, W)
        pc, g_pc, _ = _photometric_with_grad(rendered_ref, ref_img, mask_ref, sel, want_grad)
        ss, g_ss = _ssim_with_grad(rendered_ref, ref_img, mask_ref, sel, want_grad)
        pc_total += pc
        ssim_total += ss
        if want_grad:
            upstream = weights.photometric * g_pc + weights.ssim * g_ss
            grad_synth = render_vjp(ctx_rr, cfg, upstream)
            grad_p += synthesize_vjp(ctx_syn, cfg, grad_synth)

        if objective.include_consistency:
            ctx_proj = render_context(
                np.zeros((H, W, 1)), ref_depth, ref_cam, src_cam, cfg, depth_payload=True
            )
            projected = ctx_proj.out[:, 0].reshape(H, W)
            proj_mask = ctx_proj.mask.reshape(H, W)
            inter = proj_mask & synth.mask
            if sel is not None:
                inter &= sel
            count = int(inter.sum())
            if count:
                diff = projected - synth.depth
                dc_total += float(np.abs(diff)[inter].mean()) / n_src
                if want_grad:
                    s = np.sign(diff) * inter / (count * n_src)
                    scale = weights.consistency
                    grad_dr += render_vjp(ctx_proj, cfg, scale * s)
                    grad_p += synthesize_vjp(ctx_syn, cfg, -scale * s)

    ds, g_ds = _smoothness_with_grad(ref_depth, objective.guidance, want_grad)
    value = (
        weights.photometric * pc_total
        + weights.ssim * ssim_total
        + weights.smoothness * ds
        + weights.consistency * dc_total
    )
    parts = {
        "photometric": pc_total,
        "ssim": ssim_total,
        "smoothness": ds,
        "consistency": dc_total,
    }
    if not want_grad:
        return value, None, parts
    grad_dr += weights.smoothness * g_ds
    grad_p += grad_dr[:, :, None] * hyps.depths
    grad_logits = softmax_vjp(prob, grad_p)
    return value, grad_logits, parts


# ---------------------------------------------------------------------------
# finite-difference validation harness
# ---------------------------------------------------------------------------

GRADCHECK_OPS = (
    "regress_depth",
    "synthesize_source_depth",
    "photometric_loss",
    "total_loss-wrt-logits",
)

MASK_MARGIN = 0.01  # distance from the tau threshold that counts as safe


@dataclass
class GradientCheckResult:
    analytic: float
    numeric: float
    rel_err: float
    status: str  # "ok" or "inconclusive" (probe too close to a kink)


def gradient_check(op_id: str, inputs: dict, direction: np.ndarray, step: float) -> GradientCheckResult:
    """Compare the analytic directional derivative against central differences.

    inputs holds the op's evaluation point (logits, hypotheses, cameras,
    images, splat config, ...).  Probes that sit too close to a non-smooth
    kink (L1 sign flips, bilinear corner crossings, mask thresholds) are
    reported as inconclusive rather than failed.
    """
    if op_id not in GRADCHECK_OPS:
        raise ValueError(f"unknown op_id {op_id!r}; expected one of {GRADCHECK_OPS}")
    logits = np.asarray(inputs["logits"], dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != logits.shape:
        raise ValueError("direction must match the logits shape")

    scalar, analytic_grad, kink_ok = _GRADCHECK_DISPATCH[op_id](inputs, direction, step)
    analytic = float((analytic_grad * direction).sum())
    f_plus = scalar(logits + step * direction)
    f_minus = scalar(logits - step * direction)
    numeric = (f_plus - f_minus) / (2.0 * step)
    denom = max(abs(analytic), abs(numeric), 1e-12)
    rel_err = abs(analytic - numeric) / denom
    return GradientCheckResult(analytic, numeric, rel_err, "ok" if kink_ok else "inconclusive")


def _check_regress(inputs, direction, step):
    hyps = inputs["hyps"]
    logits0 = np.asarray(inputs["logits"], dtype=np.float64)
    coeff = inputs.get("coefficients")
    if coeff is None:
        coeff = np.ones(hyps.shape)

    def scalar(logits):
        p = softmax_over_hypotheses(logits)
        return float((coeff * (p * hyps.depths).sum(axis=2)).sum())

    p0 = softmax_over_hypotheses(logits0)
    depth = (p0 * hyps.depths).sum(axis=2, keepdims=True)
    grad = coeff[:, :, None] * p0 * (hyps.depths - depth)
    return scalar, grad, True  # smooth everywhere


def _check_synthesize(inputs, direction, step):
    hyps = inputs["hyps"]
    ref_cam, src_cam = inputs["ref_cam"], inputs["src_cam"]
    cfg = inputs["splat_cfg"]
    logits0 = np.asarray(inputs["logits"], dtype=np.float64)

    def forward(logits):
        prob = softmax_over_hypotheses(logits)
        volume = ProbabilityVolume(prob, logits)
        return synthesize_context(volume, hyps, ref_cam, src_cam, cfg)

    ctx0 = forward(logits0)
    H, W = ctx0.shape
    # Only pixels safely above the mask threshold enter the scalar; splat
    # positions are fixed by the hypotheses, so with that margin the scalar
    # is smooth in the probabilities and no further kink checks are needed.
    safe = (ctx0.weight_sum > cfg.tau + MASK_MARGIN).reshape(H, W)
    coeff = inputs.get("coefficients")
    if coeff is None:
        coeff = np.ones((H, W))
    coeff = coeff * safe

    def scalar(logits):
        ctx = forward(logits)
        return float((ctx.out[:, 0].reshape(H, W) * coeff).sum())

    grad_p = synthesize_vjp(ctx0, cfg, coeff)
    prob0 = softmax_over_hypotheses(logits0)
    grad = softmax_vjp(prob0, grad_p)
    return scalar, grad, bool(safe.any())


def _check_photometric(inputs, direction, step):
    hyps = inputs["hyps"]
    ref_cam, src_cam = inputs["ref_cam"], inputs["src_cam"]
    ref_img = as_image(inputs["ref_image"])
    src_img = as_image(inputs["src_image"])
    cfg = inputs["splat_cfg"]
    logits0 = np.asarray(inputs["logits"], dtype=np.float64)

    def forward(logits):
        prob = softmax_over_hypotheses(logits)
        volume = ProbabilityVolume(prob, logits)
        depth = regress_depth(volume, hyps)
        return render_context(ref_img, depth, ref_cam, src_cam, cfg), prob, depth

    ctx0, prob0, _ = forward(logits0)
    H, W = ctx0.shape
    mask0 = ctx0.mask.reshape(H, W)
    safe = (np.abs(ctx0.weight_sum - cfg.tau) > MASK_MARGIN).reshape(H, W)
    sel = mask0 & safe

    def scalar(logits):
        ctx, _, _ = forward(logits)
        rendered = ctx.out.reshape(H, W, -1)
        value, _, _ = _photometric_with_grad(
            rendered, src_img, mask0, sel, want_grad=False
        )
        return value

    rendered0 = ctx0.out.reshape(H, W, -1)
    _, g_img, _ = _photometric_with_grad(rendered0, src_img, mask0, sel, want_grad=True)
    grad_dr = render_vjp(ctx0, cfg, g_img)
    grad_p = grad_dr[:, :, None] * hyps.depths
    grad = softmax_vjp(prob0, grad_p)
    disp = _depth_displacement_bound(prob0, hyps, direction, step)
    kink_ok = _corner_margins_ok(ctx0, disp)
    kink_ok &= _l1_margins_ok(rendered0, src_img, sel, step)
    return scalar, grad, kink_ok


def _check_total(inputs, direction, step):
    import copy

    objective = inputs["objective"]
    logits0 = np.asarray(inputs["logits"], dtype=np.float64)
    cfg = objective.splat_cfg
    prob0 = softmax_over_hypotheses(logits0)
    volume = ProbabilityVolume(prob0, logits0)
    depth0 = regress_depth(volume, objective.hyps)

    if objective.select is None:
        # Restrict the evaluated means to pixels with a safe mask margin in
        # every rendering direction so threshold flips cannot enter the scalar.
        sel = np.ones(depth0.shape, dtype=bool)
        for i in range(1, len(objective.images)):
            ctx = render_context(
                objective.images[0], depth0, objective.cams[0], objective.cams[i], cfg
            )
            sel &= (np.abs(ctx.weight_sum - cfg.tau) > MASK_MARGIN).reshape(depth0.shape)
            ctx_syn = synthesize_context(
                volume, objective.hyps, objective.cams[0], objective.cams[i], cfg
            )
            sel &= (np.abs(ctx_syn.weight_sum - cfg.tau) > MASK_MARGIN).reshape(depth0.shape)
            synth = DepthMap(
                ctx_syn.out[:, 0].reshape(depth0.shape), ctx_syn.mask.reshape(depth0.shape)
            )
            ctx_rr = render_context(objective.images[i], synth, objective.cams[i], objective.cams[0], cfg)
            sel &= (np.abs(ctx_rr.weight_sum - cfg.tau) > MASK_MARGIN).reshape(depth0.shape)
        objective = copy.copy(objective)
        objective.select = sel

    def scalar(logits):
        value, _, _ = descent_objective(logits, objective, want_grad=False)
        return value

    _, grad, _ = descent_objective(logits0, objective, want_grad=True)
    disp = _depth_displacement_bound(prob0, objective.hyps, direction, step)
    kink_ok = True
    for i in range(1, len(objective.images)):
        ctx = render_context(
            objective.images[0], depth0, objective.cams[0], objective.cams[i], cfg
        )
        kink_ok &= _corner_margins_ok(ctx, disp)
        rendered = ctx.out.reshape(depth0.shape + (-1,))
        kink_ok &= _l1_margins_ok(rendered, objective.images[i], objective.select, step)
        ctx_syn = synthesize_context(volume, objective.hyps, objective.cams[0], objective.cams[i], cfg)
        synth = DepthMap(
            ctx_syn.out[:, 0].reshape(depth0.shape), ctx_syn.mask.reshape(depth0.shape)
        )
        ctx_rr = render_context(objective.images[i], synth, objective.cams[i], objective.cams[0], cfg)
        # Synthetic-depth displacement has no tight local bound; use a padded
        # global one for the reverse-direction corner margins.
        disp_rr = np.full(depth0.shape, 10.0 * float(disp.max()))
        kink_ok &= _corner_margins_ok(ctx_rr, disp_rr)
        kink_ok &= _l1_margins_ok(
            ctx_rr.out.reshape(depth0.shape + (-1,)), objective.images[0], objective.select, step
        )
    return scalar, grad, kink_ok


_GRADCHECK_DISPATCH = {
    "regress_depth": _check_regress,
    "synthesize_source_depth": _check_synthesize,
    "photometric_loss": _check_photometric,
    "total_loss-wrt-logits": _check_total,
}


def _depth_displacement_bound(prob, hyps, direction, step) -> np.ndarray:
    """Bound on |delta regressed depth| per pixel under a logits perturbation.

    |dD/dlogit_j| = P_j |d_j - D| <= span, so the first-order bound is
    step * span * sum_j |direction_j| per pixel.
    """
    span = hyps.depths.max(axis=2) - hyps.depths.min(axis=2)
    return step * span * np.abs(direction).sum(axis=2)


def _corner_margins_ok(ctx, depth_disp: np.ndarray) -> bool:
    """True when no moving contribution can cross a bilinear corner.

    The position displacement of a contribution is |dx'/dD| times the depth
    displacement bound of its source pixel; its fractional offsets must clear
    ten times that.
    """
    disp = depth_disp.reshape(-1)
    moving = (disp > 0.0) & (ctx.weight != 0.0)
    if not moving.any():
        return True
    dx_dd, dy_dd, _ = ctx.dpos
    mx = 10.0 * np.abs(dx_dd[moving]) * disp[moving]
    my = 10.0 * np.abs(dy_dd[moving]) * disp[moving]
    fx = ctx.fx[moving]
    fy = ctx.fy[moving]
    return bool(np.all((fx > mx) & (fx < 1.0 - mx) & (fy > my) & (fy < 1.0 - my)))


def _l1_margins_ok(rendered, target, sel, step) -> bool:
    """True when every selected L1 residual clears the 10*step margin."""
    r = as_image(rendered)
    t = as_image(target)
    margin = 10.0 * step
    vals = np.abs(r - t).min(axis=2)
    if sel.any() and vals[sel].min() <= margin:
        return False
    dx = np.abs(_forward_diff_x(r) - _forward_diff_x(t)).min(axis=2)
    sx = sel[:, 1:] & sel[:, :-1]
    if sx.any() and dx[sx].min() <= margin:
        return False
    dy = np.abs(_forward_diff_y(r) - _forward_diff_y(t)).min(axis=2)
    sy = sel[1:, :] & sel[:-1, :]
    if sy.any() and dy[sy].min() <= margin:
        return False
    return True


def build_stage_inputs(
    images,
    cams,
    volume: ProbabilityVolume,
    hyps: DepthHypothesisGrid,
    cfg: SplatConfig,
) -> StageLossInputs:
    """Run the synthesis/rendering passes of one stage and bundle loss inputs."""
    from .splatting import render_source_image, render_reference_image, synthesize_source_depth

    ref_img = as_image(images[0])
    ref_cam = cams[0]
    ref_depth = regress_depth(volume, hyps)
    rendered_src = []
    rendered_ref = []
    synth_depths = []
    for i in range(1, len(images)):
        src_img = as_image(images[i])
        rendered_src.append(render_source_image(ref_img, ref_depth, ref_cam, cams[i], cfg))
        synth = synthesize_source_depth(volume, hyps, ref_cam, cams[i], cfg)
        synth_depths.append(synth)
        rendered_ref.append(render_reference_image(src_img, synth, cams[i], ref_cam, cfg))
    smoothed = smooth_reference_image(
        ref_img, [r for r, _ in rendered_ref], [m for _, m in rendered_ref]
    )
    return StageLossInputs(
        ref_image=ref_img,
        src_images=[as_image(im) for im in images[1:]],
        rendered_src=rendered_src,
        rendered_ref=rendered_ref,
        smoothed_ref=smoothed,
        ref_depth=ref_depth,
        synthetic_src_depths=synth_depths,
        ref_cam=ref_cam,
        src_cams=list(cams[1:]),
        splat_cfg=cfg,
    )
