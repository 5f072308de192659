"""Regular-grid scalar volumes, phantom synthesis, and surface extraction.

Grids are axis-aligned in their frame; ``data[ix, iy, iz]`` is the voxel
whose center sits at ``origin + spacing * (ix, iy, iz)`` (mm). Files use
the SVOL format: a small text header next to a float32 little-endian raw
file in x-fastest order.

The surface pipeline mirrors the pre-interventional workflow: threshold
the tomographic volume, close small holes morphologically, then keep the
largest connected boundary component as the skin surface with outward
normals.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyInputError, FileFormatError, ValidationError
from .geom import KNOWN_FRAMES, MRI, Transform, apply

_CROSS6 = ndimage.generate_binary_structure(3, 1)   # 6-connectivity
_FULL26 = ndimage.generate_binary_structure(3, 3)   # 26-connectivity


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _check_frame(name: str) -> str:
    if name not in KNOWN_FRAMES:
        raise ValidationError(f"unknown frame {name!r}")
    return name


# ---------------------------------------------------------------------
# Grid and cloud value types
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarVolume:
    """Scalar intensities on a regular 3D grid.

    Attributes
    ----------
    dims : (3,) ints, voxels per axis
    spacing : (3,) mm per voxel, all positive
    origin : (3,) mm, frame coordinates of the center of voxel (0,0,0)
    frame : frame identifier
    data : float array of shape ``dims``
    """

    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray
    frame: str
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValidationError(f"dims must be 3 positive integers, got {self.dims}")
        spacing = np.array(self.spacing, dtype=np.float64).reshape(3)
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        if np.any(spacing <= 0):
            raise ValidationError("spacing components must be > 0")
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != dims:
            raise ValidationError(f"data shape {data.shape} does not match dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _freeze(spacing))
        object.__setattr__(self, "origin", _freeze(origin))
        object.__setattr__(self, "data", _freeze(np.array(data, copy=True)))
        _check_frame(self.frame)

    def voxel_centers_mm(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (*dims, 3)."""
        grids = np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij")
        idx = np.stack(grids, axis=-1).astype(np.float64)
        return self.origin + idx * self.spacing

    def mm_to_voxel(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.spacing


@dataclass(frozen=True)
class BinaryMask:
    """Boolean grid sharing the geometry of its source volume."""

    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray
    frame: str
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        data = np.asarray(self.data, dtype=bool)
        if data.shape != dims:
            raise ValidationError(f"mask shape {data.shape} does not match dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _freeze(np.array(self.spacing, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "origin", _freeze(np.array(self.origin, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "data", _freeze(np.array(data, copy=True)))
        _check_frame(self.frame)

    @staticmethod
    def like(v: ScalarVolume, data: np.ndarray) -> "BinaryMask":
        return BinaryMask(v.dims, v.spacing, v.origin, v.frame, data)


@dataclass(frozen=True)
class PointCloud:
    """Bare 3D points (mm) in a named frame."""

    points: np.ndarray
    frame: str

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _freeze(np.array(p, copy=True)))
        _check_frame(self.frame)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, t: Transform) -> "PointCloud":
        _require_cloud_frame(self, t.from_frame)
        return PointCloud(apply(t, self.points), t.to_frame)


@dataclass(frozen=True)
class SurfaceCloud:
    """Points with optional unit outward normals (mm) in a named frame."""

    points: np.ndarray
    normals: np.ndarray | None
    frame: str

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", _freeze(np.array(p, copy=True)))
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape[0] != p.shape[0]:
                raise ValidationError("normals and points must have equal length")
            lengths = np.linalg.norm(n, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValidationError("normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", _freeze(np.array(n, copy=True)))
        _check_frame(self.frame)

    def __len__(self) -> int:
        return self.points.shape[0]

    def as_point_cloud(self) -> PointCloud:
        return PointCloud(self.points, self.frame)

    def transformed(self, t: Transform) -> "SurfaceCloud":
        _require_cloud_frame(self, t.from_frame)
        pts = apply(t, self.points)
        normals = None
        if self.normals is not None:
            normals = self.normals @ np.asarray(t.linear).T
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return SurfaceCloud(pts, normals, t.to_frame)


def _require_cloud_frame(cloud, frame: str):
    from .errors import FrameMismatchError
    if cloud.frame != frame:
        raise FrameMismatchError(inner=cloud.frame, outer=frame, context="cloud transform")


# ---------------------------------------------------------------------
# Phantom specification
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class Inclusion:
    """Axis-aligned ellipsoid inclusion with per-modality intensities."""

    center: tuple
    radii: tuple
    mri_intensity: float
    echo_intensity: float


@dataclass(frozen=True)
class Tube:
    """Capsule-shaped vessel analogue running through the torso."""

    start: tuple
    end: tuple
    radius: float
    mri_intensity: float
    echo_intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic abdomen stand-in: an ellipsoidal torso with inclusions.

    The MRI and tissue (echogenicity) maps share geometry but get
    independent per-inclusion intensities, so the intensity relation
    between the two modalities is deliberately non-trivial.
    """

    torso_half_axes: tuple = (42.0, 36.0, 28.0)
    inclusions: tuple = (
        Inclusion((15.0, 8.0, 6.0), (10.0, 9.0, 8.0), 210.0, 40.0),
        Inclusion((-16.0, -10.0, 2.0), (9.0, 8.0, 7.0), 80.0, 160.0),
        Inclusion((2.0, -14.0, -8.0), (7.0, 7.0, 6.0), 180.0, 120.0),
        Inclusion((-8.0, 12.0, -10.0), (6.0, 6.0, 5.0), 120.0, 60.0),
    )
    tubes: tuple = (
        Tube((-28.0, -6.0, 12.0), (28.0, 10.0, 8.0), 3.5, 230.0, 20.0),
        Tube((-18.0, 20.0, 4.0), (20.0, -20.0, 8.0), 3.0, 60.0, 180.0),
        Tube((-4.0, -24.0, 12.0), (6.0, 24.0, 0.0), 2.5, 200.0, 30.0),
    )
    background_mri_intensity: float = 155.0
    background_echo_intensity: float = 90.0
    noise_amplitude: float = 2.0
    texture_amplitude: float = 1.0
    dims: tuple = (96, 96, 96)
    spacing: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        a = np.array(self.torso_half_axes, dtype=np.float64)
        if a.shape != (3,) or np.any(a <= 0):
            raise ValidationError("torso half-axes must be 3 positive numbers")
        if self.noise_amplitude < 0:
            raise ValidationError("noise amplitude must be >= 0")
        extent = (np.array(self.dims) - 1) * np.array(self.spacing) / 2.0
        if np.any(a >= extent):
            raise ValidationError("torso does not fit inside the volume grid")
        for inc in self.inclusions:
            c = np.abs(np.array(inc.center, dtype=np.float64))
            r = np.array(inc.radii, dtype=np.float64)
            if np.any(r <= 0):
                raise ValidationError("inclusion radii must be positive")
            if np.linalg.norm((c + r) / a) > 1.0:
                raise ValidationError(
                    f"inclusion at {inc.center} does not lie inside the torso")
        for tube in self.tubes:
            if tube.radius <= 0:
                raise ValidationError("tube radius must be positive")
            margin = tube.radius / float(np.min(a))
            for endpoint in (tube.start, tube.end):
                if np.linalg.norm(np.array(endpoint) / a) + margin > 1.0:
                    raise ValidationError(
                        f"tube endpoint {endpoint} does not lie inside the torso")
        return self


# ---------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------

def threshold(v: ScalarVolume, tau: float) -> BinaryMask:
    """Boolean mask of all voxels with intensity >= tau (inclusive)."""
    return BinaryMask.like(v, v.data >= tau)


def _ball(radius: int) -> np.ndarray:
    r = int(radius)
    ax = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return (x * x + y * y + z * z) <= r * r + 1e-9


def morph_close(m: BinaryMask, radius: int) -> BinaryMask:
    """Morphological closing: dilation then erosion by a radius-r ball.

    The erosion treats voxels outside the grid as filled, which keeps the
    closing extensive and idempotent on the finite grid.
    """
    if radius < 0:
        raise ValidationError("closing radius must be >= 0")
    if radius == 0:
        return m
    ball = _ball(radius)
    dilated = ndimage.binary_dilation(m.data, structure=ball, border_value=0)
    closed = ndimage.binary_erosion(dilated, structure=ball, border_value=1)
    return BinaryMask(m.dims, m.spacing, m.origin, m.frame, closed)


def boundary_voxels(m: BinaryMask) -> np.ndarray:
    """True voxels with at least one false 6-neighbor (outside counts false)."""
    interior = ndimage.binary_erosion(m.data, structure=_CROSS6, border_value=0)
    return m.data & ~interior


def extract_surface(m: BinaryMask) -> SurfaceCloud:
    """Largest connected boundary shell of a mask, as mm points with normals.

    Boundary voxels (6-neighborhood test) are grouped with 26-connectivity
    and only the component with the most points is kept. Normals come from
    a PCA over each point's two-ring (5x5x5) neighborhood on the shell and
    point away from the enclosing solid's centroid; one-ring PCA is too
    noisy on staircased shells to meet the 10-degree accuracy target.
    """
    if not m.data.any():
        raise EmptyInputError("cannot extract a surface from an empty mask")
    boundary = boundary_voxels(m)
    labels, n = ndimage.label(boundary, structure=_FULL26)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    winner = int(np.argmax(counts))
    shell = labels == winner
    idx = np.argwhere(shell)

    # Orient against the solid the shell belongs to, not the whole mask.
    solid_labels, _ = ndimage.label(m.data, structure=_FULL26)
    solid_id = solid_labels[tuple(idx[0])]
    solid_idx = np.argwhere(solid_labels == solid_id)
    interior_centroid = m.origin + solid_idx.mean(axis=0) * m.spacing

    points = m.origin + idx * m.spacing
    normals = _shell_normals(idx, shell, m.spacing, points, interior_centroid)
    return SurfaceCloud(points, normals, m.frame)


def _shell_normals(idx, shell, spacing, points_mm, interior_centroid, ring: int = 2):
    """Batched PCA normals over (2*ring+1)^3 neighborhoods of shell voxels."""
    span = range(-ring, ring + 1)
    offs = np.array([(i, j, k) for i in span for j in span for k in span])
    dims = np.array(shell.shape)
    coords = idx[:, None, :] + offs[None, :, :]               # (N, 27, 3)
    inb = np.all((coords >= 0) & (coords < dims), axis=2)
    flat = np.zeros(coords.shape[:2], dtype=bool)
    cc = coords[inb]
    flat[inb] = shell[cc[:, 0], cc[:, 1], cc[:, 2]]
    w = flat.astype(np.float64)                               # membership weights
    cnt = w.sum(axis=1)

    coords_mm = coords * np.asarray(spacing)
    mean = (coords_mm * w[:, :, None]).sum(axis=1) / cnt[:, None]
    d = (coords_mm - mean[:, None, :]) * w[:, :, None]
    cov = np.einsum("nka,nkb->nab", d, d)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                                   # least-variance axis

    outward = points_mm - interior_centroid
    few = cnt < 4
    if few.any():
        normals[few] = outward[few]
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] *= -1.0
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    return normals / lengths


def make_phantom(spec: PhantomSpec, seed: int) -> tuple[ScalarVolume, ScalarVolume]:
    """Build matching MRI and tissue-echogenicity volumes from a spec.

    Returns
    -------
    (mri, tissue) : both in the MRI frame on the same centered grid,
    deterministic for a given seed.
    """
    spec.validate()
    dims = np.array(spec.dims, dtype=int)
    spacing = np.array(spec.spacing, dtype=np.float64)
    origin = -(dims - 1) * spacing / 2.0

    grids = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    pos = np.stack(grids, axis=-1) * spacing + origin          # (*dims, 3)

    axes = np.array(spec.torso_half_axes)
    inside = np.sum((pos / axes) ** 2, axis=-1) <= 1.0

    mri = np.where(inside, spec.background_mri_intensity, 0.0)
    echo = np.where(inside, spec.background_echo_intensity, 0.0)
    for inc in spec.inclusions:
        hit = np.sum(((pos - np.array(inc.center)) / np.array(inc.radii)) ** 2, axis=-1) <= 1.0
        mri = np.where(hit, inc.mri_intensity, mri)
        echo = np.where(hit, inc.echo_intensity, echo)

    for tube in spec.tubes:
        a0 = np.array(tube.start, dtype=np.float64)
        b0 = np.array(tube.end, dtype=np.float64)
        seg = b0 - a0
        t = np.clip(np.sum((pos - a0) * seg, axis=-1) / np.dot(seg, seg), 0.0, 1.0)
        closest = a0 + t[..., None] * seg
        hit = np.sum((pos - closest) ** 2, axis=-1) <= tube.radius ** 2
        mri = np.where(hit, tube.mri_intensity, mri)
        echo = np.where(hit, tube.echo_intensity, echo)

    if spec.texture_amplitude > 0:
        # Smooth anatomical texture shared by both modalities (different
        # gains): tissue is never uniform, and the saddle term keeps every
        # rigid motion observable to intensity-based registration.
        x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
        field = x * y / 60.0 + x / 8.0 + y / 10.0 + z / 8.0
        mri = mri + spec.texture_amplitude * field * inside
        echo = echo + 0.6 * spec.texture_amplitude * field * inside

    rng = np.random.default_rng(seed)
    if spec.noise_amplitude > 0:
        mri = np.clip(mri + rng.normal(0.0, spec.noise_amplitude, mri.shape), 0.0, None)
        echo = np.clip(echo + rng.normal(0.0, spec.noise_amplitude, echo.shape), 0.0, None)

    mri_vol = ScalarVolume(tuple(dims), spacing, origin, MRI, mri)
    tissue_vol = ScalarVolume(tuple(dims), spacing, origin, MRI, echo)
    return mri_vol, tissue_vol


def sample_trilinear(v: ScalarVolume, points: np.ndarray, outside_value: float = 0.0):
    """Trilinear interpolation at mm positions; outside the grid -> 0.

    Accepts a single (3,) point or an (N, 3) batch; "outside" means beyond
    the box spanned by the voxel centers.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 3)
    g = (p - v.origin) / v.spacing
    dims = np.array(v.dims)
    inside = np.all((g >= 0.0) & (g <= dims - 1), axis=1)

    out = np.full(p.shape[0], float(outside_value))
    if inside.any():
        gi = g[inside]
        i0 = np.maximum(np.minimum(np.floor(gi).astype(np.int64), dims - 2), 0)
        i1 = np.minimum(i0 + 1, dims - 1)       # size-1 axes collapse
        f = gi - i0
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        d = v.data
        c000 = d[x0, y0, z0]
        c100 = d[x1, y0, z0]
        c010 = d[x0, y1, z0]
        c110 = d[x1, y1, z0]
        c001 = d[x0, y0, z1]
        c101 = d[x1, y0, z1]
        c011 = d[x0, y1, z1]
        c111 = d[x1, y1, z1]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[inside] = c0 * (1 - fz) + c1 * fz
    return float(out[0]) if single else out


# ---------------------------------------------------------------------
# SVOL and point-cloud files
# ---------------------------------------------------------------------

def save_svol(v: ScalarVolume, path: str) -> None:
    """Write header (``path``) plus float32 little-endian raw, x-fastest."""
    raw_name = os.path.splitext(os.path.basename(path))[0] + ".raw"
    raw_path = os.path.join(os.path.dirname(path), raw_name)
    lines = [
        "SVOL 1",
        "dims " + " ".join(str(d) for d in v.dims),
        "spacing " + " ".join(f"{s:.12g}" for s in v.spacing),
        "origin " + " ".join(f"{o:.12g}" for o in v.origin),
        f"frame {v.frame}",
        f"data {raw_name}",
        "scalar float32",
        "byteorder little",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    v.data.astype("<f4").ravel(order="F").tofile(raw_path)


def load_svol(path: str) -> ScalarVolume:
    fields = {}
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("SVOL"):
            raise FileFormatError(f"{path}: not an SVOL header")
        for line in fh:
            if line.strip():
                key, _, rest = line.partition(" ")
                fields[key.strip()] = rest.strip()
    try:
        dims = tuple(int(x) for x in fields["dims"].split())
        spacing = [float(x) for x in fields["spacing"].split()]
        origin = [float(x) for x in fields["origin"].split()]
        frame = fields["frame"]
        raw_path = os.path.join(os.path.dirname(path), fields["data"])
        if fields.get("scalar", "float32") != "float32":
            raise FileFormatError(f"{path}: unsupported scalar type")
    except KeyError as missing:
        raise FileFormatError(f"{path}: missing header field {missing}") from None
    raw = np.fromfile(raw_path, dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise FileFormatError(f"{raw_path}: data length does not match dims")
    data = raw.astype(np.float64).reshape(dims, order="F")
    return ScalarVolume(dims, spacing, origin, frame, data)


def save_cloud(cloud: PointCloud | SurfaceCloud, path: str) -> None:
    """ASCII cloud: '#'-header with the frame, one point (+normal) per line."""
    has_normals = isinstance(cloud, SurfaceCloud) and cloud.normals is not None
    with open(path, "w") as fh:
        fh.write(f"# frame {cloud.frame}\n")
        fh.write("# columns x y z" + (" nx ny nz" if has_normals else "") + "\n")
        if has_normals:
            rows = np.hstack([cloud.points, cloud.normals])
        else:
            rows = cloud.points
        for row in rows:
            fh.write(" ".join(f"{v:.12g}" for v in row) + "\n")


def load_cloud(path: str) -> PointCloud | SurfaceCloud:
    frame = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "frame":
                    frame = parts[1]
                continue
            rows.append([float(v) for v in line.split()])
    if frame is None:
        raise FileFormatError(f"{path}: missing '# frame' header")
    arr = np.array(rows, dtype=np.float64)
    if arr.size == 0:
        return PointCloud(np.zeros((0, 3)), frame)
    if arr.shape[1] == 6:
        return SurfaceCloud(arr[:, :3], arr[:, 3:], frame)
    if arr.shape[1] == 3:
        return PointCloud(arr, frame)
    raise FileFormatError(f"{path}: expected 3 or 6 columns, got {arr.shape[1]}")
