"""Hand-eye (eye-on-base) calibration, US tool geometry, and the chain state.

The camera never moves; an AR marker rides on the robot flange. Pairs of
(robot forward kinematics, observed marker pose) constrain the fixed
world-to-camera transform through the classic AX = XB relation, solved in
two stages: rotation by the Tsai-Lenz axis-angle least squares, then
translation by a linear least squares.

The probe image geometry follows the scaled pixel-to-mm mapping defined
by the image resolution and the apex offset; a fixed mounting rotation
orients the image plane in the tool frame (lateral axis across the travel
direction, depth axis along the probe axis).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    DegenerateInputError, FileFormatError, InsufficientDataError, ValidationError,
)
from .geom import (
    CAMERA, END_EFFECTOR, MRI, PATIENT, TOOL, US, WORLD,
    AffineTransform, RigidTransform, compose, invert,
    format_transform, parse_transform, rotation_angle_norm, translation_norm,
)


@dataclass(frozen=True)
class UsImageGeometry:
    """Pixel-to-mm mapping of the ultrasound image.

    ``s_x, s_y`` are mm per pixel; ``t_x, t_y`` translate (in pixels) from
    the probe apex -- the center of curvature -- to the image origin.
    """

    s_x: float
    s_y: float
    t_x: float
    t_y: float
    width: int = 64
    height: int = 48

    def __post_init__(self):
        if self.s_x <= 0 or self.s_y <= 0:
            raise ValidationError("pixel scalings must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image dims must be positive")

    def pixel_to_image_mm(self, u, v) -> np.ndarray:
        """Pixel coordinates to mm in the (unrotated) image plane."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([self.s_x * (u + self.t_x),
                         self.s_y * (v + self.t_y),
                         np.zeros_like(u)], axis=-1)


def us_image_transform(g: UsImageGeometry) -> AffineTransform:
    """Scaled map from image pixels to tool-frame mm (US -> Tool).

    Linear part diag(s_x, s_y, 1) with translation (s_x*t_x, s_y*t_y, 0);
    the scaling carries px -> mm, the translation moves the image origin
    to the probe apex.
    """
    linear = np.diag([g.s_x, g.s_y, 1.0])
    translation = np.array([g.s_x * g.t_x, g.s_y * g.t_y, 0.0])
    return AffineTransform(linear, translation, US, TOOL)


def probe_mount_rotation() -> RigidTransform:
    """Image-plane orientation in the tool frame.

    Maps image x (lateral) onto tool y, image y (depth) onto tool z --
    the probe axis that is pressed along the surface normal -- so a sweep
    along tool x stacks frames into a volume.
    """
    r = np.array([
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
    ])
    return RigidTransform(r, np.zeros(3), TOOL, TOOL)


def tool_from_us(g: UsImageGeometry) -> AffineTransform:
    """Full US -> Tool member of the chain: mounting rotation after scaling."""
    return compose(probe_mount_rotation(), us_image_transform(g))


# ---------------------------------------------------------------------
# Hand-eye calibration
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class PosePair:
    """One calibration observation.

    ``robot_pose`` is the flange pose from forward kinematics
    (EndEffector -> World); ``marker_pose`` is the simulated noisy marker
    observation (marker -> Camera). The marker frame is tagged Tool: it is
    a rigid tool on the flange.
    """

    robot_pose: RigidTransform
    marker_pose: RigidTransform


@dataclass(frozen=True)
class HandEyeResult:
    camera_to_world: RigidTransform
    rotation_residual_deg: float
    translation_residual_mm: float
    n_motions: int


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rodrigues_vector(r: np.ndarray) -> tuple[np.ndarray, float]:
    """Axis vector scaled by 2 sin(theta/2), plus the rotation angle."""
    cos_t = (np.trace(r) - 1.0) / 2.0
    cos_t = min(1.0, max(-1.0, cos_t))
    theta = float(np.arccos(cos_t))
    if theta < 1e-12:
        return np.zeros(3), 0.0
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    axis = axis / (2.0 * np.sin(theta))
    return 2.0 * np.sin(theta / 2.0) * axis, theta


def _tsai_core(motions_a: list, motions_b: list) -> tuple[np.ndarray, np.ndarray]:
    """One Tsai-Lenz solve of A_i X = X B_i: rotation stage then translation."""
    rows = []
    rhs = []
    for a, b in zip(motions_a, motions_b):
        pa, _ = _rodrigues_vector(a.rotation)
        pb, _ = _rodrigues_vector(b.rotation)
        rows.append(_skew(pa + pb))
        rhs.append(pb - pa)
    m = np.vstack(rows)
    y = np.concatenate(rhs)
    p_prime, *_ = np.linalg.lstsq(m, y, rcond=None)
    p = 2.0 * p_prime / np.sqrt(1.0 + p_prime @ p_prime)
    n2 = p @ p
    rx = ((1.0 - n2 / 2.0) * np.eye(3)
          + 0.5 * (np.outer(p, p) + np.sqrt(max(0.0, 4.0 - n2)) * _skew(p)))

    lhs = []
    rhs_t = []
    for a, b in zip(motions_a, motions_b):
        lhs.append(a.rotation - np.eye(3))
        rhs_t.append(rx @ b.translation - a.translation)
    tx, *_ = np.linalg.lstsq(np.vstack(lhs), np.concatenate(rhs_t), rcond=None)
    return rx, tx


def solve_ax_xb(motions_a: list, motions_b: list) -> RigidTransform:
    """Find X with A_i X = X B_i (Tsai-Lenz two-stage closed form).

    The rotation stage parametrizes X by a modified Rodrigues vector,
    which is singular when X's rotation approaches 180 degrees; the solve
    is therefore retried against a handful of fixed pre-rotations of the
    B side (solving for X' = X Q, then undoing Q) and the candidate with
    the smallest algebraic residual wins.

    ``motions_a`` live on the X-target side, ``motions_b`` on the source
    side; the result is tagged Camera <- World for the eye-on-base use here.
    """
    from .geom import rotation_about_axis

    candidates = [np.eye(3),
                  rotation_about_axis([1, 0, 0], 90.0),
                  rotation_about_axis([0, 1, 0], 90.0),
                  rotation_about_axis([0, 0, 1], 90.0)]
    best = None
    for q in candidates:
        conj_b = [RigidTransform(q.T @ b.rotation @ q, q.T @ b.translation,
                                 b.from_frame, b.to_frame) for b in motions_b]
        try:
            rx_prime, tx_prime = _tsai_core(motions_a, conj_b)
        except np.linalg.LinAlgError:
            continue
        rx = rx_prime @ q.T
        tx = tx_prime
        residual = 0.0
        for a, b in zip(motions_a, motions_b):
            lhs_r = a.rotation @ rx
            rhs_r = rx @ b.rotation
            lhs_t = a.rotation @ tx + a.translation
            rhs_t = rx @ b.translation + tx
            residual += float(np.sum((lhs_r - rhs_r) ** 2)
                              + np.sum((lhs_t - rhs_t) ** 2))
        if best is None or residual < best[0]:
            best = (residual, rx, tx)
    if best is None:
        raise DegenerateInputError("hand-eye rotation stage failed to converge")
    return RigidTransform(best[1], best[2], WORLD, CAMERA)


def hand_eye_calibrate(pairs: list, marker_on_flange: RigidTransform | None = None
                       ) -> HandEyeResult:
    """Eye-on-base camera-to-world calibration from tracked pose pairs.

    Consecutive pose pairs form the relative motions of the AX = XB
    problem. Requires at least 3 pose pairs with mutually non-parallel
    rotation axes (pairwise axis separation above 5 degrees).

    ``marker_on_flange`` is ground truth available only in simulation; it
    is ignored by the solver and accepted solely so harnesses can pass a
    complete scene description through one call site.
    """
    if len(pairs) < 3:
        raise InsufficientDataError(
            f"hand-eye calibration needs >= 3 pose pairs, got {len(pairs)}")

    cam_motions = []    # marker motion as seen by the camera
    robot_motions = []  # flange motion in world
    for p0, p1 in zip(pairs[:-1], pairs[1:]):
        robot_motions.append(compose(p0.robot_pose, invert(p1.robot_pose)))
        cam_motions.append(compose(p0.marker_pose, invert(p1.marker_pose)))

    axes = []
    for m in robot_motions:
        vec, theta = _rodrigues_vector(m.rotation)
        if theta > 1e-8:
            axes.append(vec / np.linalg.norm(vec))
    if len(axes) < 2:
        raise DegenerateInputError("motions carry no usable rotation axes")
    for i in range(len(axes)):
        for j in range(i + 1, len(axes)):
            sep = np.degrees(np.arccos(min(1.0, abs(float(axes[i] @ axes[j])))))
            if sep <= 5.0:
                raise DegenerateInputError(
                    f"rotation axes {i} and {j} are within {sep:.2f} deg (co-linear motions)")

    # Camera-side motions conjugate the robot motions through the fixed
    # camera-to-world transform, so they sit on the A side of A X = X B.
    x = solve_ax_xb(cam_motions, robot_motions)   # world -> camera
    t_world_from_camera = invert(x)

    rot_res = []
    tr_res = []
    for a, b in zip(cam_motions, robot_motions):
        err = compose(invert(compose(a, x)), compose(x, b))
        rot_res.append(rotation_angle_norm(err) ** 2)
        tr_res.append(translation_norm(err) ** 2)
    return HandEyeResult(
        camera_to_world=t_world_from_camera,
        rotation_residual_deg=float(np.sqrt(np.mean(rot_res))),
        translation_residual_mm=float(np.sqrt(np.mean(tr_res))),
        n_motions=len(robot_motions),
    )


def simulate_pose_pairs(true_camera_to_world: RigidTransform,
                        marker_on_flange: RigidTransform,
                        n_poses: int = 13,
                        marker_noise_mm: float = 0.0,
                        marker_noise_deg: float = 0.0,
                        seed: int = 0) -> list:
    """Synthesize tracked pose pairs with well-separated rotation axes.

    Marker observations are ``truth composed with noise``; image-based
    marker detection itself is out of scope.
    """
    rng = np.random.default_rng(seed)
    x = invert(true_camera_to_world)              # world -> camera

    # Deterministic, well-spread motion axes (golden-angle spiral).
    n_motions = n_poses - 1
    k = np.arange(n_motions)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    zax = 1.0 - 2.0 * (k + 0.5) / n_motions
    rad = np.sqrt(np.maximum(0.0, 1.0 - zax ** 2))
    axes = np.column_stack([rad * np.cos(phi), rad * np.sin(phi), zax])

    poses = [RigidTransform(np.eye(3), [150.0, -80.0, 300.0], END_EFFECTOR, WORLD)]
    for i in range(n_motions):
        angle = 25.0 + 12.0 * ((i * 7) % 3)
        r = _axis_angle(axes[i], angle)
        t = rng.uniform(-60.0, 60.0, size=3)
        motion = RigidTransform(r, t, WORLD, WORLD)
        poses.append(compose(invert(motion), poses[-1]))

    pairs = []
    for w in poses:
        truth = compose(x, compose(w, marker_on_flange))
        noisy = truth
        if marker_noise_mm > 0 or marker_noise_deg > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            dr = _axis_angle(axis, rng.normal(0.0, marker_noise_deg))
            dt = rng.normal(0.0, marker_noise_mm, size=3)
            noise = RigidTransform(dr, dt, TOOL, TOOL)
            noisy = compose(truth, noise)
        pairs.append(PosePair(robot_pose=w, marker_pose=noisy))
    return pairs


def _axis_angle(axis, angle_deg):
    from .geom import rotation_about_axis
    return rotation_about_axis(axis, angle_deg)


# ---------------------------------------------------------------------
# Calibration state (the full chain, versioned)
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationState:
    """Every member of the transformation chain, at one version.

    Updates never mutate: the closed-loop refinement returns a new state
    with ``version + 1`` where only the patient correction differs.
    """

    t_ee_from_tool: RigidTransform        # Tool -> EndEffector (probe mount)
    t_tool_from_us: AffineTransform       # US image -> Tool
    t_world_from_camera: RigidTransform   # Camera -> World (hand-eye)
    t_camera_from_mri: RigidTransform     # MRI -> Camera (surface match)
    t_patient_from_mri: RigidTransform    # MRI -> Patient (registration refinement)
    version: int = 0

    def __post_init__(self):
        expected = {
            "t_ee_from_tool": (TOOL, END_EFFECTOR),
            "t_tool_from_us": (US, TOOL),
            "t_world_from_camera": (CAMERA, WORLD),
            "t_camera_from_mri": (MRI, CAMERA),
            "t_patient_from_mri": (MRI, PATIENT),
        }
        for name, (src, dst) in expected.items():
            t = getattr(self, name)
            if (t.from_frame, t.to_frame) != (src, dst):
                raise ValidationError(
                    f"{name} must map {src} -> {dst}, got "
                    f"{t.from_frame} -> {t.to_frame}")

    @staticmethod
    def initial(geometry: UsImageGeometry,
                t_ee_from_tool: RigidTransform,
                t_world_from_camera: RigidTransform,
                t_camera_from_mri: RigidTransform) -> "CalibrationState":
        return CalibrationState(
            t_ee_from_tool=t_ee_from_tool,
            t_tool_from_us=tool_from_us(geometry),
            t_world_from_camera=t_world_from_camera,
            t_camera_from_mri=t_camera_from_mri,
            t_patient_from_mri=RigidTransform.identity(MRI, PATIENT),
            version=0,
        )

    def with_patient_correction(self, t_patient_from_mri: RigidTransform
                                ) -> "CalibrationState":
        return replace(self, t_patient_from_mri=t_patient_from_mri,
                       version=self.version + 1)


def chain_us_to_world(state: CalibrationState, robot_pose: RigidTransform):
    """US image -> World: robot pose after mount after image scaling."""
    if (robot_pose.from_frame, robot_pose.to_frame) != (END_EFFECTOR, WORLD):
        raise ValidationError("robot_pose must map EndEffector -> World")
    return compose(robot_pose, compose(state.t_ee_from_tool, state.t_tool_from_us))


def chain_mri_to_world(state: CalibrationState):
    """Uncorrected surface-match chain: (world_from_mri, mri_from_world)."""
    world_from_mri = compose(state.t_world_from_camera, state.t_camera_from_mri)
    return world_from_mri, invert(world_from_mri)


def world_from_mri_corrected(state: CalibrationState) -> RigidTransform:
    """MRI -> World including the patient correction of this version.

    The patient frame is the refreshed anatomy frame, so the corrected
    chain is relabeled back to MRI -> World for planning.
    """
    base = compose(state.t_world_from_camera, state.t_camera_from_mri)
    corrected = compose(
        base, invert(state.t_patient_from_mri).with_frames(MRI, MRI))
    return corrected


def mri_from_us(state: CalibrationState, robot_pose: RigidTransform):
    """Initial registration alignment: US image -> MRI through world."""
    _, mri_from_world = chain_mri_to_world(state)
    return compose(mri_from_world, chain_us_to_world(state, robot_pose))


def patient_from_us(state: CalibrationState, robot_pose: RigidTransform):
    """Updated chain: US image -> Patient with the refinement applied."""
    return compose(
        state.t_patient_from_mri,
        compose(invert(state.t_camera_from_mri),
                compose(invert(state.t_world_from_camera),
                        chain_us_to_world(state, robot_pose))))


# ---------------------------------------------------------------------
# Calibration file
# ---------------------------------------------------------------------

_MEMBERS = ("t_ee_from_tool", "t_tool_from_us", "t_world_from_camera",
            "t_camera_from_mri", "t_patient_from_mri")


def save_calibration(state: CalibrationState, path: str) -> None:
    lines = [f"version {state.version}"]
    for name in _MEMBERS:
        lines.append(f"member {name}")
        lines.append(format_transform(getattr(state, name)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_calibration(path: str) -> CalibrationState:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("version"):
        raise FileFormatError(f"{path}: missing version line")
    version = int(lines[0].split()[1])
    members = {}
    i = 1
    while i < len(lines):
        if not lines[i].startswith("member "):
            raise FileFormatError(f"{path}: expected 'member' at line {i + 1}")
        name = lines[i].split()[1]
        block = "\n".join(lines[i + 1:i + 6])
        members[name] = parse_transform(block)
        i += 6
    missing = set(_MEMBERS) - set(members)
    if missing:
        raise FileFormatError(f"{path}: missing members {sorted(missing)}")
    return CalibrationState(version=version, **members)
