"""Synthetic ray-cast scenes with exact per-pixel ground-truth depth.

Cameras sit on a horizontal arc looking at the origin; the scene is a
Lambertian textured primitive (tilted plane, sphere, or boxes in front of a
backdrop).  Textures are deterministic functions of the 3D surface point
(hash-lattice value noise plus a low-contrast checker), so a point's albedo
agrees across views exactly.  Per-view brightness patches emulate shadows
and deliberately break that agreement; they are recorded per view so tests
can reason about perturbation-only image edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraParams, pixel_grid, project_points
from .grids import DepthMap, downsample_area


class SceneError(ValueError):
    """Raised when a configuration yields an unusable scene."""


@dataclass
class SceneConfig:
    primitive: str = "plane"  # plane | sphere | boxes
    texture: str = "noise+checker"  # noise | checker | noise+checker
    seed: int = 0
    num_views: int = 3
    image_width: int = 128
    image_height: int = 96
    focal_px: float = 130.0
    arc_radius: float = 10.0
    arc_step_deg: float = 10.0
    depth_min: float = 6.0
    depth_max: float = 14.0
    plane_tilt_deg: float = 14.0
    plane_half_width: float = 4.3
    plane_half_height: float = 3.3
    sphere_radius: float = 2.5
    checker_cell: float = 1.1
    checker_contrast: float = 0.2
    noise_cell: float = 0.55
    noise_contrast: float = 0.8
    brightness_amp: float = 0.0
    noise_sigma: float = 0.0
    supersample: int = 2  # pixel-footprint antialiasing of rendered images

    def __post_init__(self):
        if self.num_views < 2:
            raise SceneError("need at least 2 views")
        if self.primitive not in ("plane", "sphere", "boxes"):
            raise SceneError(f"unknown primitive {self.primitive!r}")
        if not 0.0 < self.depth_min < self.depth_max:
            raise SceneError("need 0 < depth_min < depth_max")


@dataclass
class SceneView:
    image: np.ndarray  # (H, W, 1) in [0, 1]
    depth: DepthMap  # exact ray-cast depth, mask = hit
    cam: CameraParams
    shadow_mask: np.ndarray  # (H, W) bool, the brightness-perturbed patch
    view_id: int


def _hash01(ix, iy, iz, seed):
    """Deterministic lattice hash -> [0, 1), splitmix-style bit mixing."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(seed * 0x27D4EB2F165667C5 % (1 << 64))
    )
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(points: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """Trilinearly interpolated lattice noise of 3D points, in [0, 1]."""
    p = points / cell
    i0 = np.floor(p)
    f = p - i0
    # offset so negative coordinates hash distinctly
    base = (i0 + 4096.0).astype(np.int64)
    out = np.zeros(points.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _hash01(
                    base[..., 0] + dx, base[..., 1] + dy, base[..., 2] + dz, seed
                )
                wx = f[..., 0] if dx else 1.0 - f[..., 0]
                wy = f[..., 1] if dy else 1.0 - f[..., 1]
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                out += corner * wx * wy * wz
    return out


def _albedo(points: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    """Deterministic surface albedo in [0.05, 0.95] from world position.

    Noise octaves span coarse to fine cells so every cascade stage sees
    structure it can match at its own resolution.
    """
    a = np.full(points.shape[:-1], 0.5)
    if "noise" in cfg.texture:
        n = (
            0.5 * _value_noise(points, cfg.noise_cell * 4.0, cfg.seed)
            + 0.5 * _value_noise(points, cfg.noise_cell, cfg.seed + 101)
        )
        a += cfg.noise_contrast * (n - 0.5)
    if "checker" in cfg.texture:
        cells = np.floor(points / cfg.checker_cell).sum(axis=-1)
        a += cfg.checker_contrast * (np.mod(cells, 2.0) - 0.5)
    return np.clip(a, 0.05, 0.95)


_LIGHT = np.array([0.26, -0.42, -0.87])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


class Scene:
    """Geometry + texture bundle that can be ray-cast from any camera."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        # Tilt about the horizontal axis: the depth gradient runs vertically,
        # orthogonal to the horizontal camera arc, so view obliquity stays
        # symmetric across the arc.
        tilt = math.radians(cfg.plane_tilt_deg)
        self._plane_normal = np.array([0.0, -math.sin(tilt), -math.cos(tilt)])
        self._plane_u = np.array([1.0, 0.0, 0.0])
        self._plane_v = np.array([0.0, math.cos(tilt), -math.sin(tilt)])
        if cfg.primitive == "boxes":
            self._backdrop_normal = np.array([0.0, 0.0, -1.0])
            self._boxes = [
                (np.array([-1.3, -0.4, -1.8]), np.array([1.0, 0.9, 0.7])),
                (np.array([1.4, 0.5, -0.9]), np.array([0.9, 1.0, 0.6])),
            ]

    def cameras(self) -> list:
        cfg = self.cfg
        cams = []
        for i in range(cfg.num_views):
            cams.append(self.camera_at(_arc_angle(i, cfg.arc_step_deg)))
        return cams

    def camera_at(self, angle_deg: float) -> CameraParams:
        cfg = self.cfg
        a = math.radians(angle_deg)
        center = cfg.arc_radius * np.array([math.sin(a), 0.0, -math.cos(a)])
        z_axis = -center / np.linalg.norm(center)  # look at the origin
        up = np.array([0.0, 1.0, 0.0])
        x_axis = np.cross(up, z_axis)
        x_axis = x_axis / np.linalg.norm(x_axis)
        y_axis = np.cross(z_axis, x_axis)
        R = np.stack([x_axis, y_axis, z_axis])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ center
        K = np.array(
            [
                [cfg.focal_px, 0.0, (cfg.image_width - 1) / 2.0],
                [0.0, cfg.focal_px, (cfg.image_height - 1) / 2.0],
                [0.0, 0.0, 1.0],
            ]
        )
        return CameraParams(
            K, T, cfg.depth_min, cfg.depth_max, cfg.image_width, cfg.image_height
        )

    # -- ray casting ------------------------------------------------------

    def raycast(self, cam: CameraParams):
        """Image (shading * albedo, no perturbations), exact depth and normals.

        Depth is the camera-frame z of the hit: rays are parameterized as
        point(s) = origin + s * R^T K^-1 [x, y, 1], whose camera depth is s.
        The image integrates over the pixel footprint (supersampled and
        block-averaged) like a real sensor; depth stays point-sampled and
        exact at the pixel center.
        """
        depth, normals = self._cast_depth(cam)
        hit = np.isfinite(depth)
        dmap = DepthMap(np.where(hit, depth, 0.0), hit)
        aa = max(1, int(self.cfg.supersample))
        if aa == 1:
            img = self._shade(cam, depth, normals, hit)[:, :, None]
        else:
            cam_ss = _supersampled_camera(cam, aa)
            d_ss, n_ss = self._cast_depth(cam_ss)
            h_ss = np.isfinite(d_ss)
            img_ss = self._shade(cam_ss, d_ss, n_ss, h_ss)[:, :, None]
            img = downsample_area(img_ss, aa)
        return img, dmap, normals

    def _cast_depth(self, cam: CameraParams):
        W, H = cam.image_width, cam.image_height
        rays = pixel_grid(W, H) @ np.linalg.inv(cam.intrinsics).T @ cam.rotation
        return self._intersect(cam.center, rays)

    def _shade(self, cam: CameraParams, depth, normals, hit):
        W, H = cam.image_width, cam.image_height
        rays = pixel_grid(W, H) @ np.linalg.inv(cam.intrinsics).T @ cam.rotation
        pts = cam.center + rays * np.where(hit, depth, 1.0)[:, :, None]
        albedo = _albedo(pts, self.cfg)
        shade = 0.35 + 0.65 * np.clip(normals @ _LIGHT, 0.0, None)
        return np.where(hit, albedo * shade, 0.0)

    def _intersect(self, origin, rays):
        cfg = self.cfg
        H, W = rays.shape[:2]
        depth = np.full((H, W), np.inf)
        normals = np.zeros((H, W, 3))
        if cfg.primitive == "plane":
            self._hit_plane(
                origin, rays, self._plane_normal,
                cfg.plane_half_width, cfg.plane_half_height, depth, normals,
            )
        elif cfg.primitive == "sphere":
            self._hit_sphere(origin, rays, cfg.sphere_radius, depth, normals)
        else:
            self._hit_plane(
                origin, rays, self._backdrop_normal,
                cfg.plane_half_width, cfg.plane_half_height, depth, normals,
            )
            for center, half in self._boxes:
                self._hit_box(origin, rays, center, half, depth, normals)
        depth[~np.isfinite(depth)] = np.inf
        return depth, normals

    def _hit_plane(self, origin, rays, normal, half_w, half_h, depth, normals):
        denom = rays @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > 1e-12, -(origin @ normal) / denom, np.inf)
        pts = origin + rays * s[:, :, None]
        u = pts @ self._plane_u if normal is self._plane_normal else pts[:, :, 0]
        v = pts @ self._plane_v if normal is self._plane_normal else pts[:, :, 1]
        ok = (s > 1e-9) & (np.abs(u) <= half_w) & (np.abs(v) <= half_h) & (s < depth)
        depth[ok] = s[ok]
        normals[ok] = normal

    def _hit_sphere(self, origin, rays, radius, depth, normals):
        a = (rays * rays).sum(axis=-1)
        b = 2.0 * (rays @ origin)
        c = origin @ origin - radius * radius
        disc = b * b - 4.0 * a * c
        ok = disc > 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s = (-b - sq) / (2.0 * a)
        ok &= s > 1e-9
        ok &= s < depth
        pts = origin + rays * s[:, :, None]
        depth[ok] = s[ok]
        n = pts / radius
        normals[ok] = n[ok]

    def _hit_box(self, origin, rays, center, half, depth, normals):
        lo = center - half
        hi = center + half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rays
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
        tmin = np.minimum(t1, t2).max(axis=-1)
        tmax = np.maximum(t1, t2).min(axis=-1)
        ok = (tmax >= tmin) & (tmin > 1e-9) & (tmin < depth)
        # entry face normal: the axis achieving tmin, signed against the ray
        entry = np.minimum(t1, t2)
        axis = entry.argmax(axis=-1)
        sign = -np.sign(np.take_along_axis(rays, axis[:, :, None], axis=-1)[:, :, 0])
        n = np.zeros(rays.shape)
        np.put_along_axis(n, axis[:, :, None], sign[:, :, None], axis=-1)
        depth[ok] = tmin[ok]
        normals[ok] = n[ok]

    # -- view generation ---------------------------------------------------

    def render_views(self) -> list:
        cfg = self.cfg
        views = []
        for i, cam in enumerate(self.cameras()):
            img, dmap, _ = self.raycast(cam)
            if not dmap.mask.any():
                raise SceneError(f"view {i} sees no part of the primitive")
            if dmap.mask.any():
                d = dmap.depth[dmap.mask]
                if d.min() < cfg.depth_min or d.max() > cfg.depth_max:
                    raise SceneError(
                        "ground-truth depths escape the configured depth range: "
                        f"[{d.min():.3f}, {d.max():.3f}] vs "
                        f"[{cfg.depth_min}, {cfg.depth_max}]"
                    )
            rng = np.random.default_rng([cfg.seed, i, 77])
            shadow = np.zeros(dmap.shape, dtype=bool)
            if cfg.brightness_amp > 0.0:
                shadow = _ellipse_mask(cfg.image_width, cfg.image_height, rng)
                img = np.where(shadow[:, :, None], img * (1.0 - cfg.brightness_amp), img)
            if cfg.noise_sigma > 0.0:
                img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
            img = np.clip(img, 0.0, 1.0)
            views.append(SceneView(img, dmap, cam, shadow, i))
        return views


def _supersampled_camera(cam: CameraParams, factor: int) -> CameraParams:
    """Camera of a factor-times-denser grid whose block average recovers cam.

    Inverse of scale_camera: new pixel x'' = factor * x + (factor - 1) / 2.
    """
    K = cam.intrinsics.copy()
    off = (factor - 1) / 2.0
    K[0, 0] *= factor
    K[0, 1] *= factor
    K[1, 1] *= factor
    K[0, 2] = K[0, 2] * factor + off
    K[1, 2] = K[1, 2] * factor + off
    return CameraParams(
        K, cam.extrinsics, cam.depth_min, cam.depth_max,
        cam.image_width * factor, cam.image_height * factor,
    )


def _arc_angle(index: int, step_deg: float) -> float:
    """View 0 at the arc center, then alternating +/- steps outward."""
    if index == 0:
        return 0.0
    k = (index + 1) // 2
    return step_deg * k * (1 if index % 2 == 1 else -1)


def _ellipse_mask(width, height, rng) -> np.ndarray:
    cx = rng.uniform(0.25, 0.75) * width
    cy = rng.uniform(0.25, 0.75) * height
    rx = rng.uniform(0.10, 0.22) * width
    ry = rng.uniform(0.10, 0.22) * height
    ys, xs = np.mgrid[0:height, 0:width]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def generate_synthetic_scene(cfg: SceneConfig) -> list:
    """Ray-cast all configured views; deterministic for a given seed."""
    return Scene(cfg).render_views()


def covisibility_mask(
    src_view: SceneView, ref_view: SceneView, rel_tol: float = 0.01
) -> np.ndarray:
    """Source pixels whose surface point is also seen by the reference view.

    A source pixel is covisible when its ground-truth 3D point projects
    inside the reference image onto a hit pixel whose ground-truth depth
    matches the projected depth within rel_tol (relative).
    """
    from .camera import backproject_grid

    H, W = src_view.depth.shape
    out = np.zeros((H, W), dtype=bool)
    mask = src_view.depth.mask
    if not mask.any():
        return out
    pts = backproject_grid(src_view.cam, src_view.depth.depth, mask)
    xy, z, in_front = project_points(ref_view.cam, pts)
    rw, rh = ref_view.cam.image_width, ref_view.cam.image_height
    qx = np.round(xy[:, 0]).astype(np.intp)
    qy = np.round(xy[:, 1]).astype(np.intp)
    inb = in_front & (qx >= 0) & (qx < rw) & (qy >= 0) & (qy < rh)
    qx = np.clip(qx, 0, rw - 1)
    qy = np.clip(qy, 0, rh - 1)
    ref_d = ref_view.depth.depth[qy, qx]
    ref_m = ref_view.depth.mask[qy, qx]
    good = inb & ref_m & (np.abs(ref_d - z) <= rel_tol * np.maximum(ref_d, 1e-12))
    out[mask] = good
    return out
