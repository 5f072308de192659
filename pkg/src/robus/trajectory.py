"""Scan-line sampling and projection onto the patient surface.

A plan is a straight segment picked in the MRI volume. Equidistant
samples along it are pushed through the calibration chain into world
coordinates and snapped to their nearest surface points; each snapped
point plus its surface normal defines one target tool pose (probe axis
anti-parallel to the normal, lateral axis following the travel
direction).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import CalibrationState, world_from_mri_corrected
from .errors import EmptyInputError, FileFormatError, ValidationError
from .geom import (
    MRI, TOOL, WORLD, RigidTransform, apply, format_transform, parse_transform,
)
from .surfmatch import NearestNeighborIndex
from .volume import SurfaceCloud


@dataclass(frozen=True)
class TrajectoryPlan:
    """Start/end points of the acquisition segment, MRI frame, mm."""

    p_start: np.ndarray
    p_end: np.ndarray
    sample_spacing: float = 20.0

    def __post_init__(self):
        ps = np.array(self.p_start, dtype=np.float64).reshape(3)
        pe = np.array(self.p_end, dtype=np.float64).reshape(3)
        if self.sample_spacing <= 0:
            raise ValidationError("sample spacing must be positive")
        if np.linalg.norm(pe - ps) <= self.sample_spacing:
            raise ValidationError(
                "degenerate plan: start and end must be more than one "
                "sample spacing apart")
        ps.flags.writeable = False
        pe.flags.writeable = False
        object.__setattr__(self, "p_start", ps)
        object.__setattr__(self, "p_end", pe)

    @property
    def direction(self) -> np.ndarray:
        return self.p_end - self.p_start

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.direction))


@dataclass(frozen=True)
class ScanPose:
    """One target tool pose on the surface.

    The tool z-axis is anti-parallel to the surface normal (probe pressed
    into the skin); the tool origin is the surface point itself.
    """

    surface_point: np.ndarray
    normal: np.ndarray
    tool_pose: RigidTransform

    def __post_init__(self):
        p = np.array(self.surface_point, dtype=np.float64).reshape(3)
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-6:
            raise ValidationError("scan pose normal must be unit length")
        if np.linalg.norm(self.tool_pose.rotation[:, 2] + n) > 1e-6:
            raise ValidationError("tool z-axis must be anti-parallel to the normal")
        if np.linalg.norm(self.tool_pose.translation - p) > 1e-9:
            raise ValidationError("tool origin must sit on the surface point")
        p.flags.writeable = False
        n.flags.writeable = False
        object.__setattr__(self, "surface_point", p)
        object.__setattr__(self, "normal", n)


def sample_line(plan: TrajectoryPlan) -> np.ndarray:
    """Equidistant samples along the plan, endpoint included.

    Points ``P_s + j * spacing * unit`` for ``j = 0..floor(len/spacing)``;
    the endpoint is appended when it is at least half a spacing beyond the
    last regular sample.
    """
    length = plan.length
    unit = plan.direction / length
    n = int(np.floor(length / plan.sample_spacing + 1e-12))
    steps = np.arange(n + 1, dtype=np.float64) * plan.sample_spacing
    pts = plan.p_start + steps[:, None] * unit
    tail = length - steps[-1]
    if tail >= plan.sample_spacing / 2.0 * (1.0 - 1e-12):
        pts = np.vstack([pts, plan.p_end])
    return pts


def _tangent(direction, normal, previous_x):
    """Travel direction projected into the surface tangent plane."""
    proj = direction - np.dot(direction, normal) * normal
    norm = np.linalg.norm(proj)
    if norm > 1e-9:
        return proj / norm
    if previous_x is not None:
        proj = previous_x - np.dot(previous_x, normal) * normal
        norm = np.linalg.norm(proj)
        if norm > 1e-9:
            return proj / norm
    # First pose with travel parallel to the normal: deterministic
    # canonical frame, lowest-index world axis least aligned with n.
    best = int(np.argmin(np.abs(normal)))
    e = np.zeros(3)
    e[best] = 1.0
    proj = e - np.dot(e, normal) * normal
    return proj / np.linalg.norm(proj)


def project_to_surface(samples: np.ndarray, surface: SurfaceCloud) -> list:
    """Snap world-frame samples to the surface and build tool poses.

    Consecutive samples landing on the same surface point collapse to the
    first occurrence.
    """
    if len(surface) == 0:
        raise EmptyInputError("surface cloud is empty")
    if surface.normals is None:
        raise ValidationError("surface cloud carries no normals")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)

    index = NearestNeighborIndex(surface.points)
    _, nearest = index.query_batch(samples)

    travel = samples[-1] - samples[0]
    tnorm = np.linalg.norm(travel)
    travel = travel / tnorm if tnorm > 1e-9 else travel

    poses = []
    prev_idx = None
    prev_x = None
    for k in nearest:
        k = int(k)
        if prev_idx is not None and k == prev_idx:
            continue
        prev_idx = k
        point = surface.points[k]
        normal = surface.normals[k]
        z = -normal
        x = _tangent(travel, normal, prev_x)
        y = np.cross(z, x)
        rotation = np.column_stack([x, y, z])
        poses.append(ScanPose(point, normal,
                              RigidTransform(rotation, point, TOOL, WORLD)))
        prev_x = x
    return poses


def plan_in_world(plan: TrajectoryPlan, state: CalibrationState,
                  surface: SurfaceCloud) -> list:
    """Full planning step: MRI samples -> world -> surface poses.

    ``surface`` is the camera-frame patient cloud; both it and the plan
    samples are mapped into world through the current calibration chain
    (patient correction included) before projection.
    """
    world_from_mri = world_from_mri_corrected(state)
    samples_world = apply(world_from_mri, sample_line(plan))
    surface_world = surface.transformed(state.t_world_from_camera)
    return project_to_surface(samples_world, surface_world)


# ---------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------

def save_plan(plan: TrajectoryPlan, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("frame MRI\n")
        fh.write("start " + " ".join(f"{v:.12g}" for v in plan.p_start) + "\n")
        fh.write("end " + " ".join(f"{v:.12g}" for v in plan.p_end) + "\n")
        fh.write(f"spacing {plan.sample_spacing:.12g}\n")


def load_plan(path: str) -> TrajectoryPlan:
    fields = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                key, _, rest = line.partition(" ")
                fields[key.strip()] = rest.strip()
    try:
        return TrajectoryPlan(
            p_start=[float(v) for v in fields["start"].split()],
            p_end=[float(v) for v in fields["end"].split()],
            sample_spacing=float(fields["spacing"]),
        )
    except KeyError as missing:
        raise FileFormatError(f"{path}: missing plan field {missing}") from None


def save_scan_poses(poses: list, path: str) -> None:
    blocks = []
    for sp in poses:
        blocks.append("pose")
        blocks.append(format_transform(sp.tool_pose))
        blocks.append("normal " + " ".join(f"{v:.12g}" for v in sp.normal))
    with open(path, "w") as fh:
        fh.write("\n".join(blocks) + "\n")


def load_scan_poses(path: str) -> list:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    poses = []
    i = 0
    while i < len(lines):
        if lines[i] != "pose":
            raise FileFormatError(f"{path}: expected 'pose' at line {i + 1}")
        t = parse_transform("\n".join(lines[i + 1:i + 6]))
        normal = np.array([float(v) for v in lines[i + 6].split()[1:]])
        poses.append(ScanPose(t.translation, normal, t))
        i += 7
    return poses
