import numpy as np
import pytest

from robus.acquire import (
    UsFrame, UsSimParams, acquire_frame, acquire_sweep, load_us_sweep,
    rigid_scale_split, save_us_sweep, us_chain_from_tool,
)
from robus.calib import CalibrationState, UsImageGeometry, tool_from_us
from robus.errors import EmptyInputError, ValidationError
from robus.geom import (
    CAMERA, END_EFFECTOR, MRI, PATIENT, TOOL, WORLD,
    RigidTransform, random_rigid, rotation_about_axis,
)
from robus.robotsim import (
    ContactModel, PlaneSurface, StiffnessParams, TrackedFrame, run_sweep,
)
from robus.trajectory import project_to_surface
from robus.volume import ScalarVolume, sample_trilinear


GEOM = UsImageGeometry(s_x=1.5, s_y=1.5, t_x=-31.5, t_y=0.0, width=64, height=48)


def identity_state(geometry=GEOM):
    return CalibrationState(
        t_ee_from_tool=RigidTransform.identity(TOOL, END_EFFECTOR),
        t_tool_from_us=tool_from_us(geometry),
        t_world_from_camera=RigidTransform.identity(CAMERA, WORLD),
        t_camera_from_mri=RigidTransform.identity(MRI, CAMERA),
        t_patient_from_mri=RigidTransform.identity(MRI, PATIENT),
    )


def tool_pose_at(point, angle_deg=0.0):
    r = rotation_about_axis([0, 1, 0], angle_deg) @ np.array(
        [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return RigidTransform(r, point, TOOL, WORLD)


def uniform_volume(value=100.0, n=64, spacing=2.0):
    origin = -(n - 1) * spacing / 2.0
    return ScalarVolume((n, n, n), (spacing,) * 3, (origin,) * 3, MRI,
                        np.full((n, n, n), value))


class TestAcquireFrame:
    def test_uniform_tissue_gives_uniform_frame(self):
        tissue = uniform_volume(100.0)
        frame = acquire_frame(tissue, tool_pose_at([0.0, 0.0, 20.0]), GEOM,
                              UsSimParams(), identity_state())
        assert frame.image.shape == (GEOM.height, GEOM.width)
        np.testing.assert_allclose(frame.image, 100.0, atol=1e-9)

    def test_sphere_cross_section_radius(self):
        # Sphere inclusion of radius 18 centered at origin; the image plane
        # passes 8 mm from the center -> chord radius sqrt(18^2 - 8^2).
        n, spacing = 96, 1.0
        origin = -(n - 1) * spacing / 2.0
        grids = np.meshgrid(*(np.arange(n) * spacing + origin for _ in range(3)),
                            indexing="ij")
        r2 = grids[0] ** 2 + grids[1] ** 2 + grids[2] ** 2
        data = np.where(r2 <= 18.0 ** 2, 200.0, 0.0)
        tissue = ScalarVolume((n, n, n), (spacing,) * 3, (origin,) * 3, MRI, data)

        # Probe above the sphere; image plane is the tool yz-plane at x = 8.
        pose = tool_pose_at([8.0, 0.0, 30.0])
        frame = acquire_frame(tissue, pose, GEOM, UsSimParams(), identity_state())
        area_mm2 = np.count_nonzero(frame.image > 100.0) * GEOM.s_x * GEOM.s_y
        measured_radius = np.sqrt(area_mm2 / np.pi)
        expected = np.sqrt(18.0 ** 2 - 8.0 ** 2)
        assert abs(measured_radius - expected) <= GEOM.s_x  # within one pixel

    def test_matches_resampling_oracle_exactly(self):
        rng = np.random.default_rng(0)
        data = rng.random((32, 32, 32)) * 120.0
        tissue = ScalarVolume((32, 32, 32), (2.0,) * 3, (-31.0,) * 3, MRI, data)
        state = identity_state()
        pose = tool_pose_at([3.0, -4.0, 10.0], angle_deg=15.0)
        frame = acquire_frame(tissue, pose, GEOM, UsSimParams(), state)

        chain = us_chain_from_tool(state, pose).matrix4()
        for v in range(0, GEOM.height, 7):
            for u in range(0, GEOM.width, 9):
                world = (chain @ np.array([u, v, 0.0, 1.0]))[:3]
                assert frame.image[v, u] == sample_trilinear(tissue, world)

    def test_attenuation_decays_with_depth(self):
        tissue = uniform_volume(100.0)
        frame = acquire_frame(tissue, tool_pose_at([0.0, 0.0, 20.0]), GEOM,
                              UsSimParams(attenuation_per_mm=0.01), identity_state())
        column = frame.image[:, GEOM.width // 2]
        assert np.all(np.diff(column) < 0)
        assert column[0] == pytest.approx(100.0 * np.exp(-0.01 * GEOM.s_y * 0.0))

    def test_speckle_deterministic_per_seed(self):
        tissue = uniform_volume(100.0)
        params = UsSimParams(speckle_amplitude=0.2, seed=5)
        a = acquire_frame(tissue, tool_pose_at([0, 0, 20.0]), GEOM, params,
                          identity_state())
        b = acquire_frame(tissue, tool_pose_at([0, 0, 20.0]), GEOM, params,
                          identity_state())
        np.testing.assert_array_equal(a.image, b.image)
        c = acquire_frame(tissue, tool_pose_at([0, 0, 20.0]), GEOM,
                          UsSimParams(speckle_amplitude=0.2, seed=6), identity_state())
        assert not np.array_equal(a.image, c.image)

    def test_pixels_collinear_in_world(self):
        state = identity_state()
        pose = tool_pose_at([5.0, 2.0, 15.0], angle_deg=-20.0)
        frame = acquire_frame(uniform_volume(), pose, GEOM, UsSimParams(), state)
        pts = frame.pixel_world_positions()
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = rng.integers(0, GEOM.height)
            u = np.sort(rng.choice(GEOM.width, size=3, replace=False))
            a, b, c = pts[v, u[0]], pts[v, u[1]], pts[v, u[2]]
            cross = np.cross(b - a, c - a)
            assert np.linalg.norm(cross) < 1e-6

    def test_rigid_split_consistent_with_affine_chain(self):
        rng = np.random.default_rng(2)
        state = identity_state()
        pose = random_rigid(rng, TOOL, WORLD, 50.0)
        chain = us_chain_from_tool(state, pose)
        rigid = rigid_scale_split(chain, GEOM)
        for u, v in [(0, 0), (63, 47), (10, 30)]:
            via_affine = chain.apply(np.array([u, v, 0.0]))
            via_rigid = rigid.apply(np.array([GEOM.s_x * u, GEOM.s_y * v, 0.0]))
            np.testing.assert_allclose(via_affine, via_rigid, atol=1e-9)


class TestAcquireSweep:
    def sweep_frames(self):
        ax = np.arange(-80, 81, 2.0)
        gx, gy = np.meshgrid(ax, ax, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
        nrm = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
        from robus.volume import SurfaceCloud
        surface = SurfaceCloud(pts, nrm, WORLD)
        samples = np.array([[x, 0.0, 30.0] for x in np.linspace(-40, 40, 5)])
        poses = project_to_surface(samples, surface)
        contact = ContactModel(surfaces=(PlaneSurface((0, 0, 0), (0, 0, 1)),),
                               skin_stiffness=10000.0)
        return run_sweep(poses, StiffnessParams(), contact)

    def test_single_tracked_frame(self):
        tracked = [TrackedFrame(0.0, tool_pose_at([0, 0, 5.0]), 5.0)]
        out = acquire_sweep(tracked, uniform_volume(), GEOM, UsSimParams(),
                            identity_state())
        assert len(out) == 1

    def test_counts_and_timestamps_preserved(self):
        sweep = self.sweep_frames()
        out = acquire_sweep(sweep.frames, uniform_volume(), GEOM, UsSimParams(),
                            identity_state())
        assert len(out) == len(sweep.frames)
        for us, tf in zip(out, sweep.frames):
            assert us.timestamp == tf.timestamp

    def test_apex_lands_near_contact_point(self):
        sweep = self.sweep_frames()
        out = acquire_sweep(sweep.frames, uniform_volume(), GEOM, UsSimParams(),
                            identity_state())
        apex_px = np.array([-GEOM.t_x * GEOM.s_x, -GEOM.t_y * GEOM.s_y, 0.0])
        for us, tf in zip(out, sweep.frames):
            if tf.contact_force < 4.0:
                continue
            apex_world = us.pose.apply(apex_px)
            # skin plane is z = 0; the apex rides at the probe tip
            assert abs(apex_world[2]) <= 1.0

    def test_empty_stream_raises(self):
        with pytest.raises(EmptyInputError):
            acquire_sweep([], uniform_volume(), GEOM, UsSimParams(),
                          identity_state())


class TestBundleIo:
    def test_roundtrip(self, tmp_path):
        tracked = [TrackedFrame(0.1 * i, tool_pose_at([2.0 * i, 0, 10.0]), 5.0)
                   for i in range(3)]
        frames = acquire_sweep(tracked, uniform_volume(), GEOM,
                               UsSimParams(speckle_amplitude=0.1), identity_state())
        save_us_sweep(frames, str(tmp_path / "bundle"))
        back = load_us_sweep(str(tmp_path / "bundle"))
        assert len(back) == len(frames)
        for a, b in zip(back, frames):
            assert a.timestamp == pytest.approx(b.timestamp)
            np.testing.assert_allclose(a.pose.matrix4(), b.pose.matrix4(), atol=1e-9)
            np.testing.assert_allclose(a.image, b.image, atol=1e-4)  # float32 file

    def test_bad_params(self):
        with pytest.raises(ValidationError):
            UsSimParams(attenuation_per_mm=-0.1)
        with pytest.raises(ValidationError):
            UsFrame(image=np.zeros((2, 2)), geometry=GEOM,
                    pose=RigidTransform.identity("US", "World"), timestamp=0.0)
