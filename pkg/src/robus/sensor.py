"""Structured-light depth camera simulation and octree change detection.

The camera model renders a point cloud the way a ceiling-mounted RGB-D
scanner would see the scene: one nearest surface sample per pixel ray,
then per-point Gaussian noise in the camera axes. Change detection
separates the patient from the static background by differencing two
octrees built over the same root cube.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInputError, FrameMismatchError, ValidationError
from .geom import CAMERA, RigidTransform, apply, invert
from .volume import PointCloud, SurfaceCloud

# Reported Kinect-class resolution at 2 m: 3.0 mm in the x-y plane and
# 10 mm along the depth axis. The planar figure is split across the two
# lateral axes so the in-plane displacement magnitude has 3.0 mm RMS.
KINECT_XY_RESOLUTION_MM = 3.0
KINECT_Z_RESOLUTION_MM = 10.0


@dataclass(frozen=True)
class DepthCameraModel:
    """Pinhole depth sensor with axis-separable Gaussian noise.

    ``pose`` maps camera coordinates (z = optical axis, mm) into world.
    ``rgb_from_depth`` is the fixed extrinsic between the color and depth
    sensors (a transverse-axis offset on the real device); hand-eye
    calibration observes markers through the RGB side, so the chain must
    pass through it before depth points reach the world frame.
    """

    pose: RigidTransform
    width: int = 640
    height: int = 480
    focal_px: float = 575.0
    noise_xy_sigma: float = 0.0
    noise_z_sigma: float = 0.0
    rgb_from_depth: RigidTransform = field(
        default_factory=lambda: RigidTransform(
            np.eye(3), [25.0, 0.0, 0.0], CAMERA, CAMERA))

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValidationError("focal length must be positive")
        if self.noise_xy_sigma < 0 or self.noise_z_sigma < 0:
            raise ValidationError("noise sigmas must be >= 0")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image size must be positive")


def kinect_camera(pose: RigidTransform, **overrides) -> DepthCameraModel:
    """Camera model with the reported structured-light noise figures."""
    params = dict(
        pose=pose,
        noise_xy_sigma=KINECT_XY_RESOLUTION_MM / math.sqrt(2.0),
        noise_z_sigma=KINECT_Z_RESOLUTION_MM,
    )
    params.update(overrides)
    return DepthCameraModel(**params)


def overhead_camera_pose(height_mm: float = 1500.0, tilt_x_deg: float = 6.0,
                         tilt_y_deg: float = -4.0) -> RigidTransform:
    """Ceiling camera looking down at the table, slightly tilted.

    A perfectly axis-aligned downward view is a measure-zero pose a real
    mount never hits; the default tilt keeps the synthetic setup generic.
    """
    down = np.array([
        [1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, -1.0],
    ])
    from .geom import rotation_about_axis
    tilt = rotation_about_axis([1, 0, 0], tilt_x_deg) \
        @ rotation_about_axis([0, 1, 0], tilt_y_deg)
    return RigidTransform(tilt @ down, [60.0, 40.0, height_mm], CAMERA, "World")


def render_depth(model: DepthCameraModel, scene: SurfaceCloud | PointCloud,
                 seed: int) -> PointCloud:
    """Depth cloud of a world-frame scene, in the camera frame.

    Scene points are projected through the pinhole; per pixel only the
    nearest sample survives (z-buffer visibility). Gaussian noise with the
    model's sigmas is added per returned point; deterministic per seed.
    """
    pts = np.asarray(scene.points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise EmptyInputError("scene is empty")
    if scene.frame != model.pose.to_frame:
        raise FrameMismatchError(scene.frame, model.pose.to_frame, "render_depth")

    cam = apply(invert(model.pose), pts)
    front = cam[:, 2] > 1e-6
    cam = cam[front]
    if cam.shape[0] == 0:
        return PointCloud(np.zeros((0, 3)), CAMERA)

    cx = (model.width - 1) / 2.0
    cy = (model.height - 1) / 2.0
    u = np.rint(cam[:, 0] / cam[:, 2] * model.focal_px + cx).astype(np.int64)
    v = np.rint(cam[:, 1] / cam[:, 2] * model.focal_px + cy).astype(np.int64)
    visible = (u >= 0) & (u < model.width) & (v >= 0) & (v < model.height)
    cam = cam[visible]
    if cam.shape[0] == 0:
        return PointCloud(np.zeros((0, 3)), CAMERA)
    pix = v[visible] * model.width + u[visible]

    # Nearest sample per pixel: sort by (pixel, depth), keep first of each run.
    order = np.lexsort((cam[:, 2], pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = cam[order][first]

    rng = np.random.default_rng(seed)
    noise = np.column_stack([
        rng.normal(0.0, model.noise_xy_sigma, winners.shape[0]) if model.noise_xy_sigma else np.zeros(winners.shape[0]),
        rng.normal(0.0, model.noise_xy_sigma, winners.shape[0]) if model.noise_xy_sigma else np.zeros(winners.shape[0]),
        rng.normal(0.0, model.noise_z_sigma, winners.shape[0]) if model.noise_z_sigma else np.zeros(winners.shape[0]),
    ])
    return PointCloud(winners + noise, CAMERA)


def render_pixel_lookup(model: DepthCameraModel, scene: SurfaceCloud | PointCloud,
                        seed: int) -> tuple[PointCloud, np.ndarray, np.ndarray]:
    """Like :func:`render_depth` but also reports pixel ids and clean points.

    Needed by experiments that must pair each noisy return with the true
    surface sample behind it (e.g. the point-touch accuracy study).
    """
    pts = np.asarray(scene.points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise EmptyInputError("scene is empty")
    cam = apply(invert(model.pose), pts)
    front = cam[:, 2] > 1e-6
    cam = cam[front]
    cx = (model.width - 1) / 2.0
    cy = (model.height - 1) / 2.0
    u = np.rint(cam[:, 0] / cam[:, 2] * model.focal_px + cx).astype(np.int64)
    v = np.rint(cam[:, 1] / cam[:, 2] * model.focal_px + cy).astype(np.int64)
    visible = (u >= 0) & (u < model.width) & (v >= 0) & (v < model.height)
    cam = cam[visible]
    pix = v[visible] * model.width + u[visible]
    order = np.lexsort((cam[:, 2], pix))
    pix_sorted = pix[order]
    first = np.ones(pix_sorted.shape[0], dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    clean = cam[order][first]
    pix_ids = pix_sorted[first]
    rng = np.random.default_rng(seed)
    noise = np.column_stack([
        rng.normal(0.0, model.noise_xy_sigma, clean.shape[0]),
        rng.normal(0.0, model.noise_xy_sigma, clean.shape[0]),
        rng.normal(0.0, model.noise_z_sigma, clean.shape[0]),
    ])
    return PointCloud(clean + noise, CAMERA), pix_ids, clean


# ---------------------------------------------------------------------
# Octree spatial change detection
# ---------------------------------------------------------------------

class Octree:
    """Occupancy-counting octree over a fixed cubic root volume.

    The tree subdivides the root cube ``max_depth`` times; per level the
    number of inserted points in every touched cell is recorded. Two trees
    built over the same root are structurally comparable cell by cell.
    """

    def __init__(self, center, half_extent: float, max_depth: int,
                 min_points_per_node: int = 2):
        if half_extent <= 0 or max_depth < 1:
            raise ValidationError("octree needs positive extent and depth >= 1")
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.half_extent = float(half_extent)
        self.max_depth = int(max_depth)
        self.min_points_per_node = int(min_points_per_node)
        self.counts: dict[int, dict[int, int]] = {d: {} for d in range(1, self.max_depth + 1)}
        self.nodes_touched = 0
        self.n_points = 0

    @property
    def leaf_size(self) -> float:
        return 2.0 * self.half_extent / (2 ** self.max_depth)

    def _cell_indices(self, points: np.ndarray, depth: int) -> np.ndarray:
        n = 2 ** depth
        rel = (np.asarray(points, dtype=np.float64) - (self.center - self.half_extent))
        cell = np.floor(rel / (2.0 * self.half_extent) * n).astype(np.int64)
        cell = np.clip(cell, 0, n - 1)          # points on the far face stay inside
        return cell[:, 0] * n * n + cell[:, 1] * n + cell[:, 2]

    def insert(self, points: np.ndarray) -> None:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            return
        if np.any(np.abs(pts - self.center) > self.half_extent + 1e-9):
            raise ValidationError("point outside the octree root cube")
        for depth in range(1, self.max_depth + 1):
            lin = self._cell_indices(pts, depth)
            uniq, cnt = np.unique(lin, return_counts=True)
            level = self.counts[depth]
            for key, c in zip(uniq.tolist(), cnt.tolist()):
                level[key] = level.get(key, 0) + c
            self.nodes_touched += pts.shape[0]
        self.n_points += pts.shape[0]

    def leaf_ids(self, points: np.ndarray) -> np.ndarray:
        return self._cell_indices(np.asarray(points, dtype=np.float64).reshape(-1, 3),
                                  self.max_depth)

    def occupied_leaves(self) -> np.ndarray:
        return np.fromiter(self.counts[self.max_depth].keys(), dtype=np.int64)


def _root_for(points: np.ndarray, leaf_size: float) -> tuple[np.ndarray, float, int]:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(max((hi - lo).max() / 2.0, leaf_size)) * 1.001 + 1e-6
    depth = max(1, int(math.ceil(math.log2(2.0 * half / leaf_size))))
    return center, half, depth


def detect_change(background: PointCloud, current: PointCloud,
                  min_points: int = 2, leaf_size: float = 10.0) -> PointCloud:
    """Points of ``current`` that occupy octree leaves empty in ``background``.

    Both clouds are inserted into octrees of identical structure; a leaf of
    the current tree counts as new only when the background tree holds no
    point there, and leaves with fewer than ``min_points`` current points
    are discarded as sensor noise.
    """
    if background.frame != current.frame:
        raise FrameMismatchError(current.frame, background.frame, "detect_change")
    if len(current) == 0:
        return PointCloud(np.zeros((0, 3)), current.frame)

    combined = np.vstack([background.points, current.points]) \
        if len(background) else current.points
    center, half, depth = _root_for(combined, leaf_size)

    bg_tree = Octree(center, half, depth, min_points)
    bg_tree.insert(background.points)
    cur_tree = Octree(center, half, depth, min_points)
    cur_tree.insert(current.points)

    leaf = cur_tree.leaf_ids(current.points)
    bg_occupied = bg_tree.occupied_leaves()
    fresh = ~np.isin(leaf, bg_occupied)

    # Noise gate: a new leaf must hold at least min_points current points.
    uniq, cnt = np.unique(leaf[fresh], return_counts=True)
    solid = uniq[cnt >= min_points]
    keep = fresh & np.isin(leaf, solid)
    return PointCloud(current.points[keep], current.frame)
