"""3D compounding of tracked 2D frames by backward normalized convolution.

Every output voxel takes the weight-normalized average of all frame
pixels within the kernel radius of its center (gather formulation); the
implementation scatters each pixel into the fixed stencil of voxels it
can reach, which computes the same sums. Voxels whose total weight stays
below the floor are marked empty and excluded from registration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ValidationError
from .geom import WORLD
from .volume import BinaryMask, ScalarVolume, save_svol


@dataclass(frozen=True)
class CompoundingParams:
    """Output grid and kernel settings.

    The kernel is a radially symmetric Gaussian with sigma = radius / 2
    and a hard cutoff at the radius; its absolute scale cancels in the
    normalization.
    """

    spacing: float = 1.0          # mm, output voxels
    kernel_radius: float = 2.0    # mm
    min_weight: float = 1e-3      # normalization floor
    kernel_amplitude: float = 1.0

    def __post_init__(self):
        if self.spacing <= 0 or self.kernel_radius <= 0:
            raise ValidationError("spacing and kernel radius must be positive")
        if self.min_weight < 0 or self.kernel_amplitude <= 0:
            raise ValidationError("min_weight >= 0 and kernel amplitude > 0 required")

    def weight(self, dist: np.ndarray) -> np.ndarray:
        sigma = self.kernel_radius / 2.0
        w = self.kernel_amplitude * np.exp(-0.5 * (dist / sigma) ** 2)
        return np.where(dist <= self.kernel_radius, w, 0.0)


def frame_samples(frames) -> tuple[np.ndarray, np.ndarray]:
    """Stack all pixel world positions and intensities of a frame list."""
    positions = []
    values = []
    for fr in frames:
        positions.append(fr.pixel_world_positions().reshape(-1, 3))
        values.append(np.asarray(fr.image, dtype=np.float64).ravel())
    return np.vstack(positions), np.concatenate(values)


def compound(frames: list, params: CompoundingParams = CompoundingParams()
             ) -> tuple[ScalarVolume, BinaryMask]:
    """Reconstruct a regular world-frame volume from arbitrarily posed frames.

    Returns the volume and a validity mask (true where the accumulated
    weight reached the floor). The grid covers the union of the frame
    footprints padded by one kernel radius, with its origin snapped to a
    multiple of the spacing so equal inputs always yield equal grids.
    """
    if not frames:
        raise EmptyInputError("no frames to compound")
    pos, val = frame_samples(frames)

    s = params.spacing
    r = params.kernel_radius
    origin = np.floor((pos.min(axis=0) - r) / s) * s
    dims = np.ceil((pos.max(axis=0) + r - origin) / s).astype(int) + 1
    nx, ny, nz = (int(d) for d in dims)
    nvox = nx * ny * nz

    base = np.rint((pos - origin) / s).astype(np.int64)
    k = int(np.ceil(r / s))
    lin_chunks = []
    w_chunks = []
    wv_chunks = []
    for ox in range(-k, k + 1):
        for oy in range(-k, k + 1):
            for oz in range(-k, k + 1):
                # Prune stencil cells that can never be inside the kernel.
                nearest = max(0.0, (np.sqrt(ox * ox + oy * oy + oz * oz)
                                    - np.sqrt(3.0) / 2.0) * s)
                if nearest > r:
                    continue
                idx = base + (ox, oy, oz)
                inb = np.all((idx >= 0) & (idx < dims), axis=1)
                if not inb.any():
                    continue
                ii = idx[inb]
                centers = origin + ii * s
                d = np.linalg.norm(centers - pos[inb], axis=1)
                w = params.weight(d)
                hit = w > 0.0
                if not hit.any():
                    continue
                lin_chunks.append((ii[hit, 0] * ny + ii[hit, 1]) * nz + ii[hit, 2])
                w_chunks.append(w[hit])
                wv_chunks.append(w[hit] * val[inb][hit])
    if lin_chunks:
        lin = np.concatenate(lin_chunks)
        wsum = np.bincount(lin, weights=np.concatenate(w_chunks), minlength=nvox)
        acc = np.bincount(lin, weights=np.concatenate(wv_chunks), minlength=nvox)
    else:
        wsum = np.zeros(nvox)
        acc = np.zeros(nvox)

    valid = wsum >= params.min_weight
    out = np.zeros(nvox)
    out[valid] = acc[valid] / wsum[valid]
    volume = ScalarVolume((nx, ny, nz), (s, s, s), origin, WORLD,
                          out.reshape(nx, ny, nz))
    mask = BinaryMask((nx, ny, nz), (s, s, s), origin, WORLD,
                      valid.reshape(nx, ny, nz))
    return volume, mask


def compound_to_files(frames: list, params: CompoundingParams,
                      volume_path: str, mask_path: str) -> tuple[ScalarVolume, BinaryMask]:
    """Compound and write the SVOL volume plus its companion mask file."""
    volume, mask = compound(frames, params)
    save_svol(volume, volume_path)
    save_svol(ScalarVolume(mask.dims, mask.spacing, mask.origin, mask.frame,
                           mask.data.astype(np.float64)), mask_path)
    return volume, mask
