"""Flat-world projective geometry for a forward-facing pinhole camera.

Frames used throughout the package:

* ego frame: ``x`` lateral (right), ``y`` forward, ``z`` up; origin on the
  ground below the ego center.
* PV image: origin at the top-left corner, ``u`` rightward, ``v`` downward,
  principal point at the image center.
* BEV grid: row 0 is the farthest row ahead of the ego; the ego center sits
  at ``BevGrid.ego_anchor``.

All arithmetic is double precision; these functions double as the annotation
source and as the oracle for the learned model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

NEAR_PLANE_M = 0.1


class SingularConfigurationError(ValueError):
    """Raised when the ground plane is not visible from the camera."""


def focal_from_fov(width_px, hfov_deg):
    """Focal length in pixels for a given image width and horizontal FOV."""
    if not 0.0 < hfov_deg < 180.0:
        raise ValueError(f"hfov_deg must lie in (0, 180), got {hfov_deg}")
    if width_px <= 0:
        raise ValueError(f"width_px must be positive, got {width_px}")
    return (width_px / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)


def wrap_angle(a):
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class CameraModel:
    """Front camera; ``pitch_deg`` > 0 tilts the optical axis toward the ground."""

    width_px: int = 1024
    height_px: int = 768
    hfov_deg: float = 110.0
    cam_height_m: float = 1.6
    pitch_deg: float = 0.0

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0.0 < self.hfov_deg < 180.0:
            raise ValueError(f"hfov_deg must lie in (0, 180), got {self.hfov_deg}")

    @property
    def focal_px(self):
        return focal_from_fov(self.width_px, self.hfov_deg)

    @property
    def cx(self):
        return self.width_px / 2.0

    @property
    def cy(self):
        return self.height_px / 2.0

    @property
    def K(self):
        f = self.focal_px
        return np.array([[f, 0.0, self.cx], [0.0, f, self.cy], [0.0, 0.0, 1.0]])

    @property
    def R(self):
        """Rows are the camera right/down/forward axes expressed in the ego frame."""
        p = math.radians(self.pitch_deg)
        return np.array(
            [
                [1.0, 0.0, 0.0],
                [0.0, -math.sin(p), -math.cos(p)],
                [0.0, math.cos(p), -math.sin(p)],
            ]
        )

    @property
    def center(self):
        return np.array([0.0, 0.0, self.cam_height_m])

    @property
    def horizon_v(self):
        return self.cy - self.focal_px * math.tan(math.radians(self.pitch_deg))

    def to_camera(self, pts):
        """Ego-frame points ``(..., 3)`` to camera coordinates (right, down, forward)."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.center) @ self.R.T

    def pixel_rays(self, u, v):
        """Unit ray directions in the ego frame through image points ``(u, v)``."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        f = self.focal_px
        d_cam = np.stack([(u - self.cx) / f, (v - self.cy) / f, np.ones_like(u)], axis=-1)
        d = d_cam @ self.R
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class BevGrid:
    size_px: int = 200
    px_per_m: float = 4.0

    @property
    def ego_anchor(self):
        return (self.size_px / 2.0, self.size_px - 1.0)

    @property
    def coverage_m(self):
        return self.size_px / self.px_per_m

    @property
    def A(self):
        """Affine map from ego ground coordinates ``(x, y, 1)`` to grid pixels."""
        au, av = self.ego_anchor
        s = self.px_per_m
        return np.array([[s, 0.0, au], [0.0, -s, av], [0.0, 0.0, 1.0]])

    def to_pixels(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        au, av = self.ego_anchor
        return np.stack(
            [au + self.px_per_m * xy[..., 0], av - self.px_per_m * xy[..., 1]], axis=-1
        )


@dataclass(frozen=True)
class Pose2:
    x_m: float
    y_m: float
    yaw_rad: float

    def __post_init__(self):
        object.__setattr__(self, "yaw_rad", wrap_angle(self.yaw_rad))

    @property
    def forward(self):
        return np.array([math.cos(self.yaw_rad), math.sin(self.yaw_rad)])

    @property
    def right(self):
        return np.array([math.sin(self.yaw_rad), -math.cos(self.yaw_rad)])

    def world_to_ego(self, xy):
        d = np.asarray(xy, dtype=np.float64) - np.array([self.x_m, self.y_m])
        return np.stack([d @ self.right, d @ self.forward], axis=-1)

    def ego_to_world(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        return (
            np.array([self.x_m, self.y_m])
            + xy[..., :1] * self.right
            + xy[..., 1:2] * self.forward
        )


_UNIT_CORNERS = np.array(
    [[1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
     [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1]],
    dtype=np.float64,
) / 2.0  # fmt: skip


def box_corners(centers, yaws, dims):
    """Corners of N oriented boxes, shape (N, 8, 3); same order as ``Box3.corners``.

    ``dims`` rows are (length, width, height); length runs along the heading.
    """
    centers = np.asarray(centers, dtype=np.float64)
    yaws = np.asarray(yaws, dtype=np.float64)
    local = _UNIT_CORNERS[None] * np.asarray(dims, dtype=np.float64)[:, None, :]
    c, s = np.cos(yaws)[:, None], np.sin(yaws)[:, None]
    x = c * local[..., 0] - s * local[..., 1]
    y = s * local[..., 0] + c * local[..., 1]
    return np.stack([x, y, local[..., 2]], axis=-1) + centers[:, None, :]


@dataclass(frozen=True)
class Box3:
    """Oriented vehicle box; ``yaw_rad`` is the heading measured from the +x axis."""

    center: tuple
    yaw_rad: float
    length_m: float
    width_m: float
    height_m: float

    def __post_init__(self):
        if min(self.length_m, self.width_m, self.height_m) <= 0:
            raise ValueError("box dimensions must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def dims(self):
        return (self.length_m, self.width_m, self.height_m)

    def footprint(self):
        """Ground-plane corners, shape (4, 2), counter-clockwise."""
        return self.corners()[:4, :2]

    def corners(self):
        """All eight corners, shape (8, 3); bottom four first."""
        return box_corners(np.array([self.center]), np.array([self.yaw_rad]), np.array([self.dims]))[0]

    def to_ego(self, pose: Pose2):
        """Re-express a world-frame box in the ego frame of ``pose``."""
        xy = pose.world_to_ego(np.array(self.center[:2]))
        return Box3(
            (xy[0], xy[1], self.center[2]),
            wrap_angle(self.yaw_rad - pose.yaw_rad + math.pi / 2.0),
            self.length_m,
            self.width_m,
            self.height_m,
        )


class PvBox(NamedTuple):
    u_min: float
    v_min: float
    u_max: float
    v_max: float


class BevBox(NamedTuple):
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    @property
    def width(self):
        return self.u_max - self.u_min

    @property
    def height(self):
        return self.v_max - self.v_min

    @property
    def center(self):
        return ((self.u_min + self.u_max) / 2.0, (self.v_min + self.v_max) / 2.0)


# Pairs of corner indices (see Box3.corners) forming the 12 box edges.
BOX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)  # fmt: skip


def project_points(cam: CameraModel, pts):
    """Project ego-frame points, shape (..., 3) -> (..., 2); no near-plane check."""
    pc = cam.to_camera(pts)
    f = cam.focal_px
    return np.stack(
        [cam.cx + f * pc[..., 0] / pc[..., 2], cam.cy + f * pc[..., 1] / pc[..., 2]],
        axis=-1,
    )


def project_point(cam: CameraModel, p_ego) -> Optional[tuple]:
    p = np.asarray(p_ego, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    depth = cam.to_camera(p)[2]
    if depth <= NEAR_PLANE_M:
        return None
    uv = project_points(cam, p)
    return float(uv[0]), float(uv[1])


def _near_clipped_points(cam: CameraModel, corners):
    """Corners in front of the near plane plus edge crossings of the near plane."""
    depth = cam.to_camera(corners)[:, 2]
    front = depth > NEAR_PLANE_M
    if not front.any():
        return None
    pts = [corners[front]]
    for a, b in BOX_EDGES:
        if front[a] != front[b]:
            t = (NEAR_PLANE_M - depth[a]) / (depth[b] - depth[a])
            pts.append((corners[a] + t * (corners[b] - corners[a]))[None])
    return np.vstack(pts)


def project_boxes_pv(cam: CameraModel, corners):
    """Batched ``project_box_pv`` over corner arrays (N, 8, 3); absent rows are NaN."""
    corners = np.asarray(corners, dtype=np.float64)
    n = corners.shape[0]
    out = np.full((n, 4), np.nan)
    if n == 0:
        return out
    depth = cam.to_camera(corners)[..., 2]
    front = depth > NEAR_PLANE_M
    full = front.all(axis=1)
    if full.any():
        uv = project_points(cam, corners[full])
        out[full, :2] = uv.min(axis=1)
        out[full, 2:] = uv.max(axis=1)
    for k in np.flatnonzero(front.any(axis=1) & ~full):
        uv = project_points(cam, _near_clipped_points(cam, corners[k]))
        out[k, :2] = uv.min(axis=0)
        out[k, 2:] = uv.max(axis=0)
    W, H = float(cam.width_px), float(cam.height_px)
    out[:, 0] = np.maximum(out[:, 0], 0.0)
    out[:, 1] = np.maximum(out[:, 1], 0.0)
    out[:, 2] = np.minimum(out[:, 2], W)
    out[:, 3] = np.minimum(out[:, 3], H)
    with np.errstate(invalid="ignore"):
        empty = ~((out[:, 2] > out[:, 0]) & (out[:, 3] > out[:, 1]))
    out[empty] = np.nan
    return out


def project_box_pv(cam: CameraModel, box: Box3) -> Optional[PvBox]:
    """Image-space hull of a 3D box, clipped to the image.

    Box edges crossing the near plane are cut there before projection, so a
    partially visible box still gets a finite hull.
    """
    row = project_boxes_pv(cam, box.corners()[None])[0]
    return None if np.isnan(row[0]) else PvBox(*(float(c) for c in row))


def footprints_bev(grid: BevGrid, corners):
    """Batched ``footprint_bev`` over corner arrays (N, >=4, 2+); absent rows are NaN."""
    corners = np.asarray(corners, dtype=np.float64)
    px = grid.to_pixels(corners[:, :4, :2])
    lo = px.min(axis=1)
    hi = px.max(axis=1)
    n = float(grid.size_px)
    outside = (hi[:, 0] < 0) | (lo[:, 0] > n) | (hi[:, 1] < 0) | (lo[:, 1] > n)
    out = np.clip(np.concatenate([lo, hi], axis=1), 0.0, n)
    out[outside] = np.nan
    return out


def footprint_bev(grid: BevGrid, box: Box3) -> Optional[BevBox]:
    row = footprints_bev(grid, box.corners()[None])[0]
    return None if np.isnan(row[0]) else BevBox(*(float(c) for c in row))


def ground_to_image_matrix(cam: CameraModel):
    """3x3 matrix taking ego ground points ``(x, y, 1)`` to homogeneous PV pixels."""
    R = cam.R
    return cam.K @ np.column_stack([R[:, 0], R[:, 1], -R @ cam.center])


def homography_matrix(cam: CameraModel, grid: BevGrid):
    """Homography from PV pixels of ground points to BEV grid pixels."""
    if cam.cam_height_m <= 0:
        raise SingularConfigurationError("camera must sit above the ground plane")
    if cam.horizon_v >= cam.height_px:
        raise SingularConfigurationError(
            f"horizon at v={cam.horizon_v:.1f} leaves no ground visible"
        )
    G = ground_to_image_matrix(cam)
    if abs(np.linalg.det(G)) < 1e-12 * np.abs(G).max() ** 3:
        raise SingularConfigurationError("ground-to-image mapping is singular")
    return grid.A @ np.linalg.inv(G)


def _apply_h(H, uv):
    uv = np.asarray(uv, dtype=np.float64)
    hom = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1) @ H.T
    return hom[..., :2] / hom[..., 2:]


def ipm_ground_unclipped(cam: CameraModel, grid: BevGrid, uv):
    """Grid position of the ground point seen at ``uv``; None at/above the horizon."""
    u, v = uv
    ray = cam.pixel_rays(np.array([u]), np.array([v]))[0]
    if ray[2] >= -1e-12:
        return None
    return tuple(float(c) for c in _apply_h(homography_matrix(cam, grid), np.array(uv)))


def ipm_ground(cam: CameraModel, grid: BevGrid, uv) -> Optional[tuple]:
    out = ipm_ground_unclipped(cam, grid, uv)
    if out is None:
        return None
    n = grid.size_px
    if not (0.0 <= out[0] <= n and 0.0 <= out[1] <= n):
        return None
    return out
