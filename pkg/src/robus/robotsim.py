"""Compliant-contact scan simulation.

A Cartesian unit-mass point stands in for the manipulator: the control
law lives in Cartesian space and the joint-space dynamics belong to the
robot vendor's stack, so the Jacobian is treated as identity. A
virtual spring-damper pulls the probe toward the per-segment setpoint
(soft along the probe axis, stiff laterally); tissue pushes back through
a skin spring wherever the probe penetrates the surface.

Force regulation follows the indirect scheme: the setpoint is pushed
below the surface along the probe axis, starting at f_desired/k_scan and
trimmed online from the measured contact force so the steady-state force
settles at the desired value regardless of skin stiffness. Probe
orientation snaps to each segment's surface normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ValidationError
from .geom import RigidTransform, TOOL, WORLD, apply, invert
from .surfmatch import NearestNeighborIndex
from .volume import SurfaceCloud

_MASS_KG = 1.0
_MM = 1e-3  # mm -> m


@dataclass(frozen=True)
class StiffnessParams:
    """Virtual spring configuration of the compliant controller."""

    k_scan: float = 300.0       # N/m along the probe axis, range [125, 500]
    k_lateral: float = 2000.0   # N/m across it
    damping: float = 0.9        # normalized d_c in [0, 1]
    f_desired: float = 5.0      # N contact setpoint
    f_abort: float = 25.0       # N safety stop

    def __post_init__(self):
        if not (0 < self.k_scan <= self.k_lateral):
            raise ValidationError("need 0 < k_scan <= k_lateral")
        if not (0.0 <= self.damping <= 1.0):
            raise ValidationError("damping must be normalized to [0, 1]")
        if not (0 < self.f_desired < self.f_abort):
            raise ValidationError("need 0 < f_desired < f_abort")


# ---------------------------------------------------------------------
# Contact geometry
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class PlaneSurface:
    """Half-space contact: everything below the plane pushes back."""

    point: tuple
    normal: tuple
    stiffness: float | None = None   # None -> model default

    def probe(self, pos: np.ndarray):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        depth = float(np.dot(n, np.asarray(self.point) - pos))
        return depth, n


@dataclass(frozen=True)
class EllipsoidSurface:
    """Axis-aligned ellipsoid posed in world; first-order penetration depth."""

    half_axes: tuple
    pose: RigidTransform | None = None   # local -> world; None = identity at origin
    stiffness: float | None = None

    def probe(self, pos: np.ndarray):
        local = pos if self.pose is None else apply(invert(self.pose), pos)
        a = np.asarray(self.half_axes, dtype=np.float64)
        s = local / a
        g = float(np.linalg.norm(s))
        grad = s / a
        gn = float(np.linalg.norm(grad))
        if g < 1e-9 or gn < 1e-12:
            return float(np.min(a)), np.array([0.0, 0.0, 1.0])
        depth = (1.0 - g) / gn
        n_local = grad / gn
        n = n_local if self.pose is None else self.pose.rotation @ n_local
        return depth, n


class CloudSurface:
    """Contact against a surface cloud: plane fit at the nearest point."""

    def __init__(self, cloud: SurfaceCloud, stiffness: float | None = None):
        if cloud.normals is None:
            raise ValidationError("contact cloud needs normals")
        self._cloud = cloud
        self._index = NearestNeighborIndex(cloud.points)
        self.stiffness = stiffness

    def probe(self, pos: np.ndarray):
        _, idx = self._index.query_batch(pos[None, :])
        k = int(idx[0])
        n = self._cloud.normals[k]
        depth = float(np.dot(n, self._cloud.points[k] - pos))
        return depth, n


@dataclass(frozen=True)
class ContactModel:
    """Skin spring over one or more contact surfaces.

    Reaction force sums ``stiffness * penetration`` along each penetrated
    surface's outward normal; surfaces may override the default skin
    stiffness (a rigid obstacle is just a very stiff surface).
    """

    surfaces: tuple = ()
    skin_stiffness: float = 5000.0   # N/m

    def __post_init__(self):
        if self.skin_stiffness <= 0:
            raise ValidationError("skin stiffness must be positive")

    def reaction(self, pos: np.ndarray) -> tuple[np.ndarray, float]:
        force = np.zeros(3)
        for s in self.surfaces:
            depth, n = s.probe(pos)
            if depth > 0.0:
                k = s.stiffness if getattr(s, "stiffness", None) else self.skin_stiffness
                force += k * (depth * _MM) * n
        return force, float(np.linalg.norm(force))


@dataclass(frozen=True)
class TrackedFrame:
    timestamp: float
    probe_pose: RigidTransform     # Tool -> World
    contact_force: float           # N


@dataclass
class ProbeState:
    position: np.ndarray           # mm, world
    velocity: np.ndarray           # mm/s
    rotation: np.ndarray           # tool -> world


def _step_raw(position, velocity, target, z_axis, params: StiffnessParams,
              contact: ContactModel, dt: float):
    """One semi-implicit Euler step; returns (pos, vel, spring_force, contact_force)."""
    err = (target - position) * _MM
    e_par = np.dot(err, z_axis) * z_axis
    e_perp = err - e_par
    spring = params.k_scan * e_par + params.k_lateral * e_perp

    v = velocity * _MM
    v_par = np.dot(v, z_axis) * z_axis
    v_perp = v - v_par
    d_par = params.damping * 2.0 * np.sqrt(params.k_scan * _MASS_KG)
    d_perp = params.damping * 2.0 * np.sqrt(params.k_lateral * _MASS_KG)
    damp = -(d_par * v_par + d_perp * v_perp)

    reaction, fmag = contact.reaction(position)
    accel = (spring + damp + reaction) / _MASS_KG        # m/s^2
    velocity = velocity + accel / _MM * dt               # mm/s
    position = position + velocity * dt
    return position, velocity, spring, fmag


def step_controller(state: ProbeState, setpoint, params: StiffnessParams,
                    contact: ContactModel, dt: float):
    """Advance the probe one control step toward a scan pose.

    ``setpoint`` is a ScanPose; its surface point is the literal spring
    anchor (force-regulation offsets are applied by the sweep loop).
    Returns (new_state, commanded_spring_force_N, contact_force_N).
    """
    if not (0.0 < dt <= 0.01):
        raise ValidationError("control step must satisfy 0 < dt <= 0.01 s")
    z_axis = setpoint.tool_pose.rotation[:, 2]
    pos, vel, spring, fmag = _step_raw(
        state.position.copy(), state.velocity.copy(),
        np.asarray(setpoint.surface_point, dtype=np.float64), z_axis,
        params, contact, dt)
    new_state = ProbeState(position=pos, velocity=vel,
                           rotation=np.array(setpoint.tool_pose.rotation))
    return new_state, spring, fmag


@dataclass(frozen=True)
class SweepResult:
    frames: tuple
    status: str                    # completed | force_abort | timeout
    abort_time: float | None = None

    @property
    def aborted(self) -> bool:
        return self.status != "completed"


def run_sweep(poses: list, params: StiffnessParams, contact: ContactModel,
              rate: float = 30.0, travel_speed: float = 30.0,
              approach_retract: float = 20.0, dt: float = 1e-3,
              segment_timeout: float = 8.0, adapt_gain: float = 40.0,
              force_tol: float = 0.5) -> SweepResult:
    """Drive the probe through the scan poses and record tracked frames.

    Between poses the spring anchor glides along the segment at
    ``travel_speed`` while the desired-force offset pushes it below the
    surface; a segment completes once the glide is done and the contact
    force has settled (or, in free space, the probe sits within 1 mm of
    its target). Forces past ``f_abort`` stop the sweep within the same
    control step and the partial result is flagged.
    """
    if len(poses) < 2:
        raise InsufficientDataError("a sweep needs at least 2 poses")

    frames: list = []
    steps_per_frame = max(1, int(round(1.0 / (rate * dt))))
    offset = params.f_desired / params.k_scan / _MM      # mm below the surface
    t = 0.0
    step_count = 0

    first = poses[0]
    position = first.surface_point + first.normal * approach_retract
    velocity = np.zeros(3)
    rotation = np.array(first.tool_pose.rotation)

    def emit(fmag):
        frames.append(TrackedFrame(
            timestamp=t,
            probe_pose=RigidTransform(rotation, position, TOOL, WORLD),
            contact_force=fmag))

    _, f0 = contact.reaction(position)
    emit(f0)

    # The first "segment" glides the anchor down from the retracted start,
    # so touchdown is a ramp rather than an impact.
    prev_anchor = np.array(position, dtype=np.float64)
    for pose in poses:
        rotation = np.array(pose.tool_pose.rotation)
        z_axis = rotation[:, 2]
        seg_start = prev_anchor
        seg_end = np.asarray(pose.surface_point, dtype=np.float64)
        seg_len = float(np.linalg.norm(seg_end - seg_start))
        glide_time = seg_len / travel_speed
        seg_t = 0.0
        settled_steps = 0
        while True:
            if seg_t >= glide_time:
                anchor = seg_end
            else:
                anchor = seg_start + (seg_end - seg_start) * (seg_t / glide_time)
            target = anchor + z_axis * offset

            position, velocity, _, fmag = _step_raw(
                position, velocity, target, z_axis, params, contact, dt)
            t += dt
            seg_t += dt
            step_count += 1

            in_contact = fmag > 0.05
            if in_contact:
                offset += adapt_gain * (params.f_desired - fmag) * dt
                offset = float(np.clip(offset, 0.0, 60.0))

            if fmag > params.f_abort:
                emit(fmag)
                return SweepResult(tuple(frames), "force_abort", abort_time=t)

            if step_count % steps_per_frame == 0:
                emit(fmag)

            if seg_t >= glide_time:
                if in_contact:
                    settled_steps = settled_steps + 1 \
                        if abs(fmag - params.f_desired) <= force_tol else 0
                    if settled_steps >= 30:
                        break
                else:
                    err = np.linalg.norm(target - position)
                    if err < 1.0 and np.linalg.norm(velocity) < 5.0:
                        break
            if seg_t > glide_time + segment_timeout:
                emit(fmag)
                return SweepResult(tuple(frames), "timeout", abort_time=t)
        prev_anchor = seg_end

    _, fmag = contact.reaction(position)
    if not frames or frames[-1].timestamp < t:
        emit(fmag)
    return SweepResult(tuple(frames), "completed")


# ---------------------------------------------------------------------
# Sweep file
# ---------------------------------------------------------------------

def save_sweep(result: SweepResult, params: StiffnessParams, path: str) -> None:
    """Header echoing the controller parameters, then one frame per line."""
    with open(path, "w") as fh:
        fh.write(f"# status {result.status}\n")
        fh.write(f"# k_scan {params.k_scan:.12g} k_lateral {params.k_lateral:.12g} "
                 f"damping {params.damping:.12g} f_desired {params.f_desired:.12g} "
                 f"f_abort {params.f_abort:.12g}\n")
        fh.write("# columns t m00..m33 force\n")
        for fr in result.frames:
            vals = [fr.timestamp] + list(fr.probe_pose.matrix4().ravel()) + [fr.contact_force]
            fh.write(" ".join(f"{v:.12g}" for v in vals) + "\n")


def load_sweep(path: str) -> SweepResult:
    status = "completed"
    frames = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "status":
                    status = parts[1]
                continue
            vals = [float(v) for v in line.split()]
            m = np.array(vals[1:17]).reshape(4, 4)
            frames.append(TrackedFrame(
                timestamp=vals[0],
                probe_pose=RigidTransform.from_matrix4(m, TOOL, WORLD),
                contact_force=vals[17]))
    return SweepResult(tuple(frames), status)
