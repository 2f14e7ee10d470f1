"""Pinhole camera model, back-projection/projection and cross-view warping.

COORDINATE CONVENTIONS
======================
World frame: right-handed, arbitrary origin, world units.

Camera frame (standard computer vision):
  - origin at the optical center
  - X right, Y down, Z forward (optical axis, into the scene)
  - "depth" of a point is its camera-frame Z coordinate, not ray length

Image frame:
  - pixel centers at integer coordinates
  - origin at the top-left pixel center, x rightward, y downward
  - pixels are addressed as (x, y)

The extrinsic matrix is the 4x4 world-to-camera rigid transform
[R | t; 0 0 0 1]: X_cam = R @ X_world + t.  All geometry is computed in
64-bit floating point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Camera-frame depths at or below this are treated as behind the camera.
MIN_FRONT_DEPTH = 1e-12


class BehindCameraError(ValueError):
    """A point's camera-frame depth is not positive."""


@dataclass(frozen=True)
class CameraParams:
    """Intrinsics, world-to-camera extrinsics and valid depth range of one view.

    intrinsics: 3x3 upper-triangular matrix, focal lengths and principal
        point in pixels, bottom-right entry 1.
    extrinsics: 4x4 world-to-camera rigid transform (world units).
    depth_min, depth_max: valid depth range, 0 < depth_min < depth_max.
    image_width, image_height: image size in pixels.
    """

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    depth_min: float
    depth_max: float
    image_width: int
    image_height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.extrinsics, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {K.shape}")
        if T.shape != (4, 4):
            raise ValueError(f"extrinsics must be 4x4, got {T.shape}")
        if not (K[1, 0] == 0 and K[2, 0] == 0 and K[2, 1] == 0):
            raise ValueError("intrinsics must be upper-triangular")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be strictly positive")
        if K[2, 2] != 1.0:
            raise ValueError("intrinsics[2,2] must be exactly 1")
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9:
            raise ValueError("rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) >= 1e-9:
            raise ValueError("rotation block must have determinant 1")
        if np.abs(T[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() != 0.0:
            raise ValueError("last extrinsic row must be [0, 0, 0, 1]")
        if not (0.0 < self.depth_min < self.depth_max):
            raise ValueError(
                f"need 0 < depth_min < depth_max, got [{self.depth_min}, {self.depth_max}]"
            )
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates."""
        return -self.rotation.T @ self.translation


def scale_camera(cam: CameraParams, scale: float) -> CameraParams:
    """Rescale intrinsics to a lower resolution produced by block averaging.

    A block average by factor s = 1/scale places the new pixel center j at
    original coordinate s*j + (s-1)/2, so the principal point picks up a
    (s-1)/2 offset on top of the plain 1/s scaling.
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    s = 1.0 / scale
    new_w = int(round(cam.image_width * scale))
    new_h = int(round(cam.image_height * scale))
    if new_w * s != cam.image_width or new_h * s != cam.image_height:
        raise ValueError(
            f"image size {cam.image_width}x{cam.image_height} not divisible by {int(s)}"
        )
    K = cam.intrinsics.copy()
    off = (s - 1.0) / 2.0
    K[0, 0] /= s
    K[0, 1] /= s
    K[1, 1] /= s
    K[0, 2] = (K[0, 2] - off) / s
    K[1, 2] = (K[1, 2] - off) / s
    return CameraParams(K, cam.extrinsics, cam.depth_min, cam.depth_max, new_w, new_h)


def backproject(cam: CameraParams, pixel, depth: float) -> np.ndarray:
    """Lift a pixel at a given depth to a 3D world point.

    Raises ValueError for non-positive depth.
    """
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    x, y = float(pixel[0]), float(pixel[1])
    ray = np.linalg.solve(cam.intrinsics, np.array([x, y, 1.0]))
    p_cam = ray * depth  # ray has z == 1, so p_cam z == depth
    return cam.rotation.T @ (p_cam - cam.translation)


def project(cam: CameraParams, world_point) -> tuple[np.ndarray, float]:
    """Project a world point; returns ((x, y), camera-frame depth).

    Raises BehindCameraError when the camera-frame depth is <= 1e-12.
    """
    p = np.asarray(world_point, dtype=np.float64)
    p_cam = cam.rotation @ p + cam.translation
    z = p_cam[2]
    if z <= MIN_FRONT_DEPTH:
        raise BehindCameraError(f"point has camera-frame depth {z}")
    uvw = cam.intrinsics @ p_cam
    return np.array([uvw[0] / uvw[2], uvw[1] / uvw[2]]), float(z)


def warp_pixel(
    ref: CameraParams, src: CameraParams, pixel, depth: float
) -> tuple[np.ndarray, float]:
    """Map a reference pixel at a depth hypothesis into the source view.

    Equivalent to project(src, backproject(ref, pixel, depth)).  The source
    pixel may land outside the source image bounds; callers mask.  The
    returned source depth is the camera-frame z of the shared 3D point.
    """
    return project(src, backproject(ref, pixel, depth))


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Homogeneous pixel coordinates of a full image, shape (H, W, 3)."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)  # (H, W)
    return np.stack([gx, gy, np.ones_like(gx)], axis=-1)


def warp_grid(ref: CameraParams, src: CameraParams, depths: np.ndarray):
    """Warp every reference pixel at per-pixel depths into the source view.

    depths: (H, W) or (H, W, M) depth hypotheses for the reference grid.
    Returns (x, y, src_depth, in_front), each shaped like depths.  Pixels
    behind the source camera get in_front=False and unusable coordinates;
    callers must mask (no error, occlusion geometry makes them routine).
    """
    depths = np.asarray(depths, dtype=np.float64)
    H, W = depths.shape[:2]
    rays = pixel_grid(W, H) @ np.linalg.inv(ref.intrinsics).T  # (H, W, 3), z == 1
    rel_r, rel_t = relative_transform(ref, src)
    a = rays @ rel_r.T  # (H, W, 3) direction part, scales with depth
    if depths.ndim == 3:
        a = a[:, :, None, :]
        d = depths[..., None]
    else:
        d = depths[..., None]
    p_src = a * d + rel_t  # (..., 3) source-camera-frame points
    z = p_src[..., 2]
    in_front = z > MIN_FRONT_DEPTH
    uvw = p_src @ src.intrinsics.T
    safe_w = np.where(in_front, uvw[..., 2], 1.0)
    x = np.where(in_front, uvw[..., 0] / safe_w, 0.0)
    y = np.where(in_front, uvw[..., 1] / safe_w, 0.0)
    return x, y, z, in_front


def warp_grid_with_ddepth(ref: CameraParams, src: CameraParams, depths: np.ndarray):
    """warp_grid plus derivatives of (x, y, src_depth) w.r.t. the depth.

    Used by the analytic gradients of the splat-based renderers.  Returns
    (x, y, z, in_front, dx_dd, dy_dd, dz_dd).
    """
    depths = np.asarray(depths, dtype=np.float64)
    H, W = depths.shape[:2]
    rays = pixel_grid(W, H) @ np.linalg.inv(ref.intrinsics).T
    rel_r, rel_t = relative_transform(ref, src)
    a = rays @ rel_r.T  # (H, W, 3)
    alpha = a @ src.intrinsics.T  # K_s @ a, per pixel
    beta0 = src.intrinsics @ rel_t  # constant
    if depths.ndim == 3:
        a = a[:, :, None, :]
        alpha = alpha[:, :, None, :]
    d = depths[..., None]
    p_src = a * d + rel_t
    z = p_src[..., 2]
    in_front = z > MIN_FRONT_DEPTH
    uvw = alpha * d + beta0
    safe_w = np.where(in_front, uvw[..., 2], 1.0)
    x = np.where(in_front, uvw[..., 0] / safe_w, 0.0)
    y = np.where(in_front, uvw[..., 1] / safe_w, 0.0)
    # d/dd of (alpha_x d + b_x)/(alpha_z d + b_z) collapses to a constant
    # numerator over the squared denominator.
    num_x = alpha[..., 0] * beta0[2] - beta0[0] * alpha[..., 2]
    num_y = alpha[..., 1] * beta0[2] - beta0[1] * alpha[..., 2]
    dx_dd = np.where(in_front, num_x / safe_w**2, 0.0)
    dy_dd = np.where(in_front, num_y / safe_w**2, 0.0)
    dz_dd = np.broadcast_to(a[..., 2], z.shape)
    return x, y, z, in_front, dx_dd, dy_dd, dz_dd


def relative_transform(ref: CameraParams, src: CameraParams):
    """Rotation and translation taking reference-camera points to source-camera points."""
    rel = src.extrinsics @ np.linalg.inv(ref.extrinsics)
    return rel[:3, :3], rel[:3, 3]


def project_points(cam: CameraParams, points: np.ndarray):
    """Vectorized projection of (N, 3) world points.

    Returns (xy (N, 2), depth (N,), in_front (N,)); behind-camera points are
    flagged rather than raised.
    """
    p = np.asarray(points, dtype=np.float64)
    p_cam = p @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    in_front = z > MIN_FRONT_DEPTH
    uvw = p_cam @ cam.intrinsics.T
    safe_w = np.where(in_front, uvw[:, 2], 1.0)
    xy = np.stack([uvw[:, 0] / safe_w, uvw[:, 1] / safe_w], axis=1)
    xy[~in_front] = 0.0
    return xy, z, in_front


def backproject_grid(cam: CameraParams, depth: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Back-project every masked pixel of a depth map; returns (N, 3) world points."""
    H, W = depth.shape
    pix = pixel_grid(W, H)[mask]  # (N, 3) homogeneous
    rays = pix @ np.linalg.inv(cam.intrinsics).T
    p_cam = rays * depth[mask][:, None]
    return (p_cam - cam.translation) @ cam.rotation
