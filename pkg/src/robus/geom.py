"""Frame-tagged rigid and affine transform algebra.

All spatial bookkeeping in the pipeline runs through the two transform
types defined here. Transforms are immutable, carry the names of the
frames they map between, and refuse to compose when the inner frames
disagree -- silent frame errors are the main failure mode of a
calibration chain, so they are checked at every composition.

Conventions
-----------
* A transform maps points of ``from_frame`` into ``to_frame``:
  ``p_to = rotation @ p_from + translation``.
* Translations are millimetres.
* The rotation-error metric uses a fixed-axis XYZ Euler decomposition
  (R = Rz @ Ry @ Rx); only internal consistency matters for the metric.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import FrameMismatchError, ValidationError

# Frame identifiers used across the calibration chain.
MRI = "MRI"
CAMERA = "Camera"
WORLD = "World"
END_EFFECTOR = "EndEffector"
TOOL = "Tool"
US = "US"
PATIENT = "Patient"

KNOWN_FRAMES = frozenset({MRI, CAMERA, WORLD, END_EFFECTOR, TOOL, US, PATIENT})

_ORTHO_TOL = 1e-9


def _check_frame(name: str) -> str:
    if name not in KNOWN_FRAMES:
        raise ValidationError(
            f"unknown frame {name!r}; expected one of {sorted(KNOWN_FRAMES)}"
        )
    return name


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


def _orthonormal_residual(r: np.ndarray) -> float:
    return float(np.abs(r.T @ r - np.eye(3)).max())


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] *= -1.0
        r = u @ vt
    return r


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) map ``from_frame -> to_frame`` (rotation + translation, mm)."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str
    to_frame: str

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValidationError("rigid transform needs a finite 3x3 rotation and 3-vector")
        det = np.linalg.det(r)
        if det < 0.5 or _orthonormal_residual(r) > 0.5:
            raise ValidationError(
                f"matrix is not close to a rotation (det={det:.6g})"
            )
        # Drift from long compose chains is repaired, exact inputs are kept bitwise.
        if _orthonormal_residual(r) > _ORTHO_TOL or abs(det - 1.0) > _ORTHO_TOL:
            r = nearest_rotation(r)
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))
        _check_frame(self.from_frame)
        _check_frame(self.to_frame)

    # -- core algebra ------------------------------------------------

    @property
    def linear(self) -> np.ndarray:
        return self.rotation

    def apply(self, points: np.ndarray) -> np.ndarray:
        return apply(self, points)

    def compose(self, other: "RigidTransform | AffineTransform"):
        return compose(self, other)

    def __matmul__(self, other):
        if isinstance(other, (RigidTransform, AffineTransform)):
            return compose(self, other)
        return NotImplemented

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def with_frames(self, from_frame: str, to_frame: str) -> "RigidTransform":
        """Relabel frames without touching the map (explicit, audited use only)."""
        return replace(self, from_frame=from_frame, to_frame=to_frame)

    @staticmethod
    def identity(frame: str, to_frame: str | None = None) -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3), frame, to_frame or frame)

    @staticmethod
    def from_matrix4(m: np.ndarray, from_frame: str, to_frame: str) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(m[:3, :3], m[:3, 3], from_frame, to_frame)


@dataclass(frozen=True)
class AffineTransform:
    """Invertible affine map ``from_frame -> to_frame`` (linear + translation, mm)."""

    linear: np.ndarray
    translation: np.ndarray
    from_frame: str
    to_frame: str

    def __post_init__(self):
        a = np.array(self.linear, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if a.shape != (3, 3) or not np.all(np.isfinite(a)) or not np.all(np.isfinite(t)):
            raise ValidationError("affine transform needs a finite 3x3 linear part and 3-vector")
        if abs(np.linalg.det(a)) <= 1e-12:
            raise ValidationError("affine linear part is singular")
        object.__setattr__(self, "linear", _freeze(a))
        object.__setattr__(self, "translation", _freeze(t))
        _check_frame(self.from_frame)
        _check_frame(self.to_frame)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return apply(self, points)

    def compose(self, other):
        return compose(self, other)

    def __matmul__(self, other):
        if isinstance(other, (RigidTransform, AffineTransform)):
            return compose(self, other)
        return NotImplemented

    def inverse(self) -> "AffineTransform":
        return invert(self)

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def with_frames(self, from_frame: str, to_frame: str) -> "AffineTransform":
        return replace(self, from_frame=from_frame, to_frame=to_frame)

    @staticmethod
    def from_matrix4(m: np.ndarray, from_frame: str, to_frame: str) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        return AffineTransform(m[:3, :3], m[:3, 3], from_frame, to_frame)


Transform = RigidTransform | AffineTransform


def compose(a: Transform, b: Transform):
    """Chain two transforms: ``compose(a, b)(x) == a(b(x))``.

    Requires ``a.from_frame == b.to_frame``; the result maps
    ``b.from_frame -> a.to_frame``. Rigid stays rigid, anything else
    becomes affine.
    """
    if a.from_frame != b.to_frame:
        raise FrameMismatchError(inner=b.to_frame, outer=a.from_frame)
    linear = a.linear @ b.linear
    translation = a.linear @ b.translation + a.translation
    if isinstance(a, RigidTransform) and isinstance(b, RigidTransform):
        return RigidTransform(linear, translation, b.from_frame, a.to_frame)
    return AffineTransform(linear, translation, b.from_frame, a.to_frame)


def invert(t: Transform):
    """Inverse map with the frames swapped."""
    if isinstance(t, RigidTransform):
        rt = t.rotation.T
        return RigidTransform(rt, -rt @ t.translation, t.to_frame, t.from_frame)
    inv = np.linalg.inv(t.linear)
    return AffineTransform(inv, -inv @ t.translation, t.to_frame, t.from_frame)


def apply(t: Transform, points: np.ndarray) -> np.ndarray:
    """Apply a transform to one point (3,) or a batch (N, 3), in mm."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        return t.linear @ p + t.translation
    return p @ t.linear.T + t.translation


def euler_xyz_from_rotation(r: np.ndarray) -> np.ndarray:
    """Fixed-axis XYZ angles (radians) with R = Rz(c) @ Ry(b) @ Rx(a)."""
    r = np.asarray(r, dtype=np.float64)
    sy = -r[2, 0]
    sy = min(1.0, max(-1.0, sy))
    b = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-12:
        a = np.arctan2(r[2, 1], r[2, 2])
        c = np.arctan2(r[1, 0], r[0, 0])
    else:
        # Gimbal lock: only a +/- c is observable, put everything in a.
        a = np.arctan2(-r[1, 2], r[1, 1])
        c = 0.0
    return np.array([a, b, c])


def rotation_angle_norm(t: RigidTransform | np.ndarray) -> float:
    """Euclidean norm of the three fixed-axis XYZ rotation angles, degrees."""
    r = t.rotation if isinstance(t, RigidTransform) else np.asarray(t)
    angles = euler_xyz_from_rotation(r)
    return float(np.degrees(np.linalg.norm(angles)))


def translation_norm(t: Transform) -> float:
    return float(np.linalg.norm(t.translation))


# -- constructors used throughout tests and the pipeline --------------

def rotation_about_axis(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix about an arbitrary axis."""
    u = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(u)
    if n == 0:
        raise ValidationError("rotation axis must be nonzero")
    u = u / n
    th = np.radians(angle_deg)
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)


def euler_xyz_rotation(rx_deg: float, ry_deg: float, rz_deg: float) -> np.ndarray:
    """Fixed-axis XYZ rotation: Rz @ Ry @ Rx, angles in degrees."""
    rx = rotation_about_axis([1, 0, 0], rx_deg)
    ry = rotation_about_axis([0, 1, 0], ry_deg)
    rz = rotation_about_axis([0, 0, 1], rz_deg)
    return rz @ ry @ rx


def random_rigid(rng: np.random.Generator, from_frame: str, to_frame: str,
                 max_translation: float = 100.0) -> RigidTransform:
    """Uniform random rotation (QR method) + uniform translation, for tests."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1.0
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(q, t, from_frame, to_frame)


# -- text serialization ------------------------------------------------

def format_transform(t: Transform) -> str:
    """Serialize as from/to frame names plus the 4x4 row-major matrix.

    12 significant digits, one row per line; the same block is embedded
    in calibration files, pose lists, and registration reports.
    """
    kind = "rigid" if isinstance(t, RigidTransform) else "affine"
    lines = [f"{kind} from={t.from_frame} to={t.to_frame}"]
    for row in t.matrix4():
        lines.append(" ".join(f"{v:.12g}" for v in row))
    return "\n".join(lines)


def parse_transform(text: str) -> Transform:
    """Inverse of :func:`format_transform`."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 5:
        raise ValidationError("transform block must be a header plus 4 matrix rows")
    head = lines[0].split()
    kind = head[0]
    fields = dict(part.split("=", 1) for part in head[1:])
    m = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if m.shape != (4, 4):
        raise ValidationError("transform matrix must be 4x4")
    cls = RigidTransform if kind == "rigid" else AffineTransform
    return cls.from_matrix4(m, fields["from"], fields["to"])
