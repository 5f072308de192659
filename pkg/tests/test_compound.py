import numpy as np
import pytest

from robus.acquire import UsFrame, UsSimParams, acquire_frame
from robus.calib import CalibrationState, UsImageGeometry, tool_from_us
from robus.compound import (
    CompoundingParams, compound, compound_to_files, frame_samples,
)
from robus.errors import EmptyInputError, ValidationError
from robus.geom import (
    CAMERA, END_EFFECTOR, MRI, PATIENT, TOOL, US, WORLD,
    RigidTransform,
)
from robus.volume import ScalarVolume


GEOM = UsImageGeometry(s_x=1.5, s_y=1.5, t_x=-7.5, t_y=0.0, width=16, height=12)


def plane_frame(image, x_offset=0.0, geometry=GEOM):
    """Frame whose image plane is the world yz-plane at x = x_offset."""
    rotation = np.array([
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
    ])
    pose = RigidTransform(rotation, [x_offset, 0.0, 0.0], US, WORLD)
    return UsFrame(image=np.asarray(image, dtype=np.float64), geometry=geometry,
                   pose=pose, timestamp=0.0)


def brute_force_gather(frames, params, volume):
    """Reference per-voxel gather over every frame pixel."""
    pos, val = frame_samples(frames)
    out = np.zeros(volume.dims)
    mask = np.zeros(volume.dims, dtype=bool)
    for ix in range(volume.dims[0]):
        for iy in range(volume.dims[1]):
            for iz in range(volume.dims[2]):
                center = volume.origin + np.array([ix, iy, iz]) * volume.spacing
                d = np.linalg.norm(pos - center, axis=1)
                w = params.weight(d)
                total = w.sum()
                if total >= params.min_weight:
                    out[ix, iy, iz] = np.dot(w, val) / total
                    mask[ix, iy, iz] = True
    return out, mask


class TestCompound:
    def test_single_frame_identity_resample(self):
        rng = np.random.default_rng(0)
        image = rng.random((GEOM.height, GEOM.width)) * 100.0
        frame = plane_frame(image)
        params = CompoundingParams(spacing=GEOM.s_x, kernel_radius=1e-6)
        volume, mask = compound([frame], params)
        pts = frame.pixel_world_positions().reshape(-1, 3)
        vals = image.ravel()
        for p, v in zip(pts, vals):
            idx = np.rint((p - volume.origin) / volume.spacing).astype(int)
            assert volume.data[tuple(idx)] == v
            assert mask.data[tuple(idx)]
        # voxels off the plane hold no data
        assert mask.data.sum() == len(pts)

    def test_coincident_frames_cancel_in_normalization(self):
        rng = np.random.default_rng(1)
        image = rng.random((GEOM.height, GEOM.width)) * 50.0
        frame = plane_frame(image)
        params = CompoundingParams(spacing=1.0, kernel_radius=2.0)
        one, mask_one = compound([frame], params)
        two, mask_two = compound([frame, frame], params)
        np.testing.assert_allclose(two.data, one.data, rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(mask_one.data, mask_two.data)

    def test_matches_bruteforce_gather(self):
        rng = np.random.default_rng(2)
        frames = [plane_frame(rng.random((GEOM.height, GEOM.width)) * 80.0,
                              x_offset=x) for x in (0.0, 1.0, 2.0)]
        params = CompoundingParams(spacing=2.0, kernel_radius=2.5)
        volume, mask = compound(frames, params)
        oracle, oracle_mask = brute_force_gather(frames, params, volume)
        np.testing.assert_array_equal(mask.data, oracle_mask)
        np.testing.assert_allclose(volume.data, oracle, atol=1e-6)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(3)
        image = rng.random((GEOM.height, GEOM.width)) * 100.0 + 20.0
        volume, mask = compound([plane_frame(image)],
                                CompoundingParams(spacing=1.0, kernel_radius=3.0))
        data = volume.data[mask.data]
        assert data.min() >= image.min() - 1e-9
        assert data.max() <= image.max() + 1e-9

    def test_kernel_amplitude_cancels(self):
        rng = np.random.default_rng(4)
        image = rng.random((GEOM.height, GEOM.width)) * 60.0
        frames = [plane_frame(image, x_offset=x) for x in (0.0, 1.5)]
        a, _ = compound(frames, CompoundingParams(kernel_amplitude=1.0))
        b, _ = compound(frames, CompoundingParams(kernel_amplitude=7.25,
                                                  min_weight=1e-3 * 7.25))
        np.testing.assert_allclose(a.data, b.data, atol=1e-9)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        frames = [plane_frame(rng.random((GEOM.height, GEOM.width)) * 90.0,
                              x_offset=x) for x in (0.0, 1.0, 2.0, 3.0)]
        params = CompoundingParams(spacing=1.5, kernel_radius=2.0)
        fwd, _ = compound(frames, params)
        rev, _ = compound(frames[::-1], params)
        np.testing.assert_allclose(fwd.data, rev.data, atol=1e-9)

    def test_empty_input_raises(self):
        with pytest.raises(EmptyInputError):
            compound([], CompoundingParams())

    def test_compound_to_files(self, tmp_path):
        rng = np.random.default_rng(6)
        frame = plane_frame(rng.random((GEOM.height, GEOM.width)) * 70.0)
        vol_path = str(tmp_path / "us.svol")
        mask_path = str(tmp_path / "us_mask.svol")
        volume, mask = compound_to_files([frame], CompoundingParams(),
                                         vol_path, mask_path)
        from robus.volume import load_svol
        back = load_svol(vol_path)
        np.testing.assert_allclose(back.data, volume.data, atol=1e-4)
        back_mask = load_svol(mask_path)
        np.testing.assert_array_equal(back_mask.data >= 0.5, mask.data)

    def test_bad_params(self):
        with pytest.raises(ValidationError):
            CompoundingParams(spacing=-1.0)
        with pytest.raises(ValidationError):
            CompoundingParams(kernel_radius=0.0)

    def test_sphere_sweep_reconstruction(self):
        # Frames slicing a synthetic sphere re-assemble into a volume whose
        # bright region matches the sphere support.
        n, spacing = 48, 2.0
        origin = -(n - 1) * spacing / 2.0
        grids = np.meshgrid(*(np.arange(n) * spacing + origin for _ in range(3)),
                            indexing="ij")
        r2 = grids[0] ** 2 + grids[1] ** 2 + grids[2] ** 2
        tissue = ScalarVolume((n, n, n), (spacing,) * 3, (origin,) * 3, MRI,
                              np.where(r2 <= 15.0 ** 2, 200.0, 10.0))
        state = CalibrationState(
            t_ee_from_tool=RigidTransform.identity(TOOL, END_EFFECTOR),
            t_tool_from_us=tool_from_us(GEOM),
            t_world_from_camera=RigidTransform.identity(CAMERA, WORLD),
            t_camera_from_mri=RigidTransform.identity(MRI, CAMERA),
            t_patient_from_mri=RigidTransform.identity(MRI, PATIENT),
        )
        down = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
        frames = []
        for i, x in enumerate(np.linspace(-18.0, 18.0, 25)):
            pose = RigidTransform(down, [x, 0.0, 16.0], TOOL, WORLD)
            frames.append(acquire_frame(tissue, pose, GEOM, UsSimParams(), state,
                                        timestamp=0.1 * i))
        volume, mask = compound(frames, CompoundingParams(spacing=2.0,
                                                          kernel_radius=2.5))
        assert mask.data.any()
        centers = volume.voxel_centers_mm()
        inside = (np.sum(centers ** 2, axis=-1) <= 12.0 ** 2) & mask.data
        outside = (np.sum(centers ** 2, axis=-1) >= 18.0 ** 2) & mask.data
        assert volume.data[inside].mean() > 150.0
        assert volume.data[outside].mean() < 50.0
