"""Simulated ultrasound acquisition: 2D frames sliced from the tissue volume.

Each tracked probe pose turns into one frame: pixel centers are mapped
through the image geometry and the calibration chain into world space,
the ground-truth tissue volume is sampled trilinearly at those positions,
and a monotone intensity map, depth attenuation, and multiplicative
speckle make the result ultrasound-like. No refraction or shadowing; the
downstream similarity only needs intensity/gradient correlation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .calib import CalibrationState, UsImageGeometry
from .errors import EmptyInputError, FileFormatError, ValidationError
from .geom import (
    US, WORLD, AffineTransform, RigidTransform, apply, compose, invert,
    format_transform, parse_transform,
)
from .volume import ScalarVolume, sample_trilinear


@dataclass(frozen=True)
class UsSimParams:
    """Synthesis knobs for the simulated scanner.

    The intensity map is a monotone gain/gamma curve; speckle is
    multiplicative uniform noise; attenuation decays with beam depth.
    ``world_from_anatomy`` places the tissue volume in world (simulation
    ground truth, identity when the phantom sits at its MRI coordinates).
    """

    gain: float = 1.0
    gamma: float = 1.0
    speckle_amplitude: float = 0.0
    attenuation_per_mm: float = 0.0
    seed: int = 0
    world_from_anatomy: RigidTransform | None = None

    def __post_init__(self):
        if self.attenuation_per_mm < 0:
            raise ValidationError("attenuation must be >= 0")
        if self.speckle_amplitude < 0 or self.gain <= 0 or self.gamma <= 0:
            raise ValidationError("speckle >= 0 and gain, gamma > 0 required")

    def map_intensity(self, values: np.ndarray) -> np.ndarray:
        return self.gain * np.power(np.maximum(values, 0.0), self.gamma)


@dataclass(frozen=True)
class UsFrame:
    """One acquired image plus its mm-frame pose (US -> World)."""

    image: np.ndarray            # (height, width), row = depth index
    geometry: UsImageGeometry
    pose: RigidTransform
    timestamp: float

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.shape != (self.geometry.height, self.geometry.width):
            raise ValidationError(
                f"image shape {img.shape} does not match geometry "
                f"({self.geometry.height}, {self.geometry.width})")
        if (self.pose.from_frame, self.pose.to_frame) != (US, WORLD):
            raise ValidationError("frame pose must map US -> World")
        img = np.array(img, copy=True)
        img.flags.writeable = False
        object.__setattr__(self, "image", img)

    def pixel_world_positions(self) -> np.ndarray:
        """World-space centers of all pixels, shape (height, width, 3)."""
        g = self.geometry
        u = np.arange(g.width, dtype=np.float64)
        v = np.arange(g.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v, indexing="xy")
        mm = np.stack([g.s_x * uu, g.s_y * vv, np.zeros_like(uu)], axis=-1)
        return apply(self.pose, mm.reshape(-1, 3)).reshape(g.height, g.width, 3)


def rigid_scale_split(chain: AffineTransform, geometry: UsImageGeometry
                      ) -> RigidTransform:
    """Rigid part of the affine US chain; pixels carry the diagonal scaling.

    The chain's linear part is (rotation @ diag(s_x, s_y, 1)); dividing the
    scalings out leaves the rigid image pose, so
    ``chain((u, v, 0)) == pose((s_x u, s_y v, 0))`` exactly.
    """
    rot = np.array(chain.linear) @ np.diag([1.0 / geometry.s_x,
                                            1.0 / geometry.s_y, 1.0])
    return RigidTransform(rot, chain.translation, US, WORLD)


def us_chain_from_tool(state: CalibrationState, tool_pose: RigidTransform
                       ) -> AffineTransform:
    """Affine US -> World for a tracked tool pose (robot pose times mount)."""
    return compose(tool_pose, state.t_tool_from_us)


def acquire_frame(tissue: ScalarVolume, tool_pose: RigidTransform,
                  geometry: UsImageGeometry, params: UsSimParams,
                  state: CalibrationState, timestamp: float = 0.0,
                  frame_seed=None) -> UsFrame:
    """Slice one US frame from the tissue volume at a tracked tool pose."""
    if not np.all(np.isfinite(tool_pose.matrix4())):
        raise ValidationError("tool pose must be finite")
    chain = us_chain_from_tool(state, tool_pose)
    pose = rigid_scale_split(chain, geometry)

    g = geometry
    u = np.arange(g.width, dtype=np.float64)
    v = np.arange(g.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    px = np.stack([uu, vv, np.zeros_like(uu)], axis=-1).reshape(-1, 3)
    world = apply(chain, px)

    anatomy = world if params.world_from_anatomy is None else \
        apply(invert(params.world_from_anatomy), world)
    values = sample_trilinear(tissue, anatomy)
    image = params.map_intensity(values).reshape(g.height, g.width)

    if params.attenuation_per_mm > 0:
        depth = np.maximum(g.s_y * (v + g.t_y), 0.0)
        image = image * np.exp(-params.attenuation_per_mm * depth)[:, None]

    if params.speckle_amplitude > 0:
        rng = np.random.default_rng(params.seed if frame_seed is None else frame_seed)
        image = image * (1.0 + params.speckle_amplitude
                         * rng.uniform(-1.0, 1.0, image.shape))

    return UsFrame(image=image, geometry=geometry, pose=pose, timestamp=timestamp)


def acquire_sweep(tracked_frames, tissue: ScalarVolume,
                  geometry: UsImageGeometry, params: UsSimParams,
                  state: CalibrationState) -> list:
    """One UsFrame per tracked frame, timestamps copied (zero-lag link)."""
    frames = list(tracked_frames)
    if not frames:
        raise EmptyInputError("tracked stream is empty")
    out = []
    for i, tf in enumerate(frames):
        out.append(acquire_frame(
            tissue, tf.probe_pose, geometry, params, state,
            timestamp=tf.timestamp, frame_seed=[params.seed, i]))
    return out


# ---------------------------------------------------------------------
# Sweep bundle on disk
# ---------------------------------------------------------------------

def save_us_sweep(frames: list, dirpath: str) -> None:
    """Directory bundle: raw float32 images plus an index of poses/times."""
    os.makedirs(dirpath, exist_ok=True)
    g = frames[0].geometry
    lines = [
        f"frames {len(frames)}",
        f"geometry s_x {g.s_x:.12g} s_y {g.s_y:.12g} t_x {g.t_x:.12g} "
        f"t_y {g.t_y:.12g} width {g.width} height {g.height}",
    ]
    for i, fr in enumerate(frames):
        name = f"frame_{i:04d}.raw"
        fr.image.astype("<f4").tofile(os.path.join(dirpath, name))
        lines.append(f"frame {i}")
        lines.append(f"time {fr.timestamp:.12g}")
        lines.append(f"data {name}")
        lines.append(format_transform(fr.pose))
    with open(os.path.join(dirpath, "index.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_us_sweep(dirpath: str) -> list:
    index = os.path.join(dirpath, "index.txt")
    with open(index) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("frames"):
        raise FileFormatError(f"{index}: missing frame count")
    n = int(lines[0].split()[1])
    gtok = lines[1].split()
    gvals = {gtok[i]: gtok[i + 1] for i in range(1, len(gtok) - 1, 2)}
    geometry = UsImageGeometry(
        s_x=float(gvals["s_x"]), s_y=float(gvals["s_y"]),
        t_x=float(gvals["t_x"]), t_y=float(gvals["t_y"]),
        width=int(gvals["width"]), height=int(gvals["height"]))
    frames = []
    i = 2
    for _ in range(n):
        if not lines[i].startswith("frame"):
            raise FileFormatError(f"{index}: expected frame header at line {i + 1}")
        timestamp = float(lines[i + 1].split()[1])
        name = lines[i + 2].split()[1]
        pose = parse_transform("\n".join(lines[i + 3:i + 8]))
        raw = np.fromfile(os.path.join(dirpath, name), dtype="<f4")
        image = raw.astype(np.float64).reshape(geometry.height, geometry.width)
        frames.append(UsFrame(image=image, geometry=geometry,
                              pose=RigidTransform(pose.linear, pose.translation,
                                                  US, WORLD),
                              timestamp=timestamp))
        i += 8
    return frames
