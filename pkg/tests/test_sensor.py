import numpy as np
import pytest

from robus.errors import EmptyInputError, FrameMismatchError, ValidationError
from robus.geom import CAMERA, WORLD, apply
from robus.sensor import (
    DepthCameraModel, Octree, detect_change, kinect_camera,
    overhead_camera_pose, render_depth,
)
from robus.volume import PointCloud


def plane_scene(z_mm=0.0, half=400.0, step=2.0):
    ax = np.arange(-half, half + step, step)
    x, y = np.meshgrid(ax, ax, indexing="ij")
    pts = np.column_stack([x.ravel(), y.ravel(), np.full(x.size, z_mm)])
    return PointCloud(pts, WORLD)


class TestRenderDepth:
    def test_noiseless_plane_is_coplanar(self):
        model = DepthCameraModel(pose=overhead_camera_pose(1500.0))
        cloud = render_depth(model, plane_scene(z_mm=0.0), seed=0)
        assert len(cloud) > 1000
        centered = cloud.points - cloud.points.mean(axis=0)
        smallest_spread = np.linalg.svd(centered, compute_uv=False)[-1]
        assert smallest_spread < 1e-6

    def test_noise_std_matches_configured_sigma(self):
        pose = overhead_camera_pose(2000.0)
        model = kinect_camera(pose)
        scene = plane_scene(z_mm=0.0, half=900.0, step=2.5)
        clean = render_depth(DepthCameraModel(pose=pose), scene, seed=1)
        noisy = render_depth(model, scene, seed=1)
        assert len(clean) == len(noisy) >= 1e5
        diff = noisy.points - clean.points
        for axis, sigma in ((0, model.noise_xy_sigma), (1, model.noise_xy_sigma),
                            (2, model.noise_z_sigma)):
            measured = np.std(diff[:, axis])
            assert abs(measured - sigma) / sigma < 0.10

    def test_back_face_occluded(self):
        # Dense sphere so every pixel over the disk holds front samples; the
        # visibility oracle is then analytic: for a camera at distance d the
        # self-occluded cap is everything below the horizon ring z = R^2/d.
        rng = np.random.default_rng(2)
        u = rng.normal(size=(400000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        sphere = PointCloud(100.0 * u, WORLD)  # centered at origin
        model = DepthCameraModel(pose=overhead_camera_pose(1500.0))
        cloud = render_depth(model, sphere, seed=0)
        horizon_z = 100.0 ** 2 / 1500.0
        back = apply(model.pose, cloud.points)[:, 2] < horizon_z - 5.0
        assert not back.any()

    def test_deterministic_per_seed(self):
        model = kinect_camera(overhead_camera_pose())
        scene = plane_scene(half=100.0, step=5.0)
        a = render_depth(model, scene, seed=3)
        b = render_depth(model, scene, seed=3)
        np.testing.assert_array_equal(a.points, b.points)
        c = render_depth(model, scene, seed=4)
        assert not np.array_equal(a.points, c.points)

    def test_empty_scene_raises(self):
        model = DepthCameraModel(pose=overhead_camera_pose())
        with pytest.raises(EmptyInputError):
            render_depth(model, PointCloud(np.zeros((0, 3)), WORLD), seed=0)

    def test_rejects_bad_model(self):
        with pytest.raises(ValidationError):
            DepthCameraModel(pose=overhead_camera_pose(), focal_px=-1.0)
        with pytest.raises(ValidationError):
            DepthCameraModel(pose=overhead_camera_pose(), noise_z_sigma=-2.0)


class TestOctree:
    def test_counts_and_touch_budget(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-50, 50, size=(500, 3))
        tree = Octree(center=(0, 0, 0), half_extent=60.0, max_depth=4)
        tree.insert(pts)
        assert tree.n_points == 500
        assert tree.nodes_touched <= 500 * 4
        assert sum(tree.counts[4].values()) == 500

    def test_point_outside_root_rejected(self):
        tree = Octree(center=(0, 0, 0), half_extent=10.0, max_depth=3)
        with pytest.raises(ValidationError):
            tree.insert(np.array([[100.0, 0.0, 0.0]]))

    def test_leaf_size(self):
        tree = Octree(center=(0, 0, 0), half_extent=80.0, max_depth=4)
        assert tree.leaf_size == pytest.approx(10.0)


class TestDetectChange:
    def table_and_torso(self, seed=0):
        # Densities comparable to a structured-light scan (~3 mm pitch).
        rng = np.random.default_rng(seed)
        table = rng.uniform([-300, -300, -1], [300, 300, 1], size=(60000, 3))
        u = rng.normal(size=(60000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        torso = u * np.array([120.0, 90.0, 60.0])
        torso = torso[torso[:, 2] > 12.0]  # camera only sees the top
        return PointCloud(table, CAMERA), PointCloud(torso, CAMERA)

    def test_no_change_is_empty(self):
        _, torso = self.table_and_torso()
        out = detect_change(torso, torso, min_points=1)
        assert len(out) == 0

    def test_torso_detected_on_table(self):
        table, torso = self.table_and_torso(seed=1)
        merged = PointCloud(np.vstack([table.points, torso.points]), CAMERA)
        out = detect_change(table, merged, min_points=2)
        # everything returned lies in the torso bounding box (plus a leaf margin)
        lo = torso.points.min(axis=0) - 10.0
        hi = torso.points.max(axis=0) + 10.0
        assert np.all((out.points >= lo) & (out.points <= hi))
        # nearly all torso points survive
        torso_set = {tuple(p) for p in np.round(torso.points, 6)}
        got = sum(tuple(p) in torso_set for p in np.round(out.points, 6))
        assert got / len(torso) >= 0.99

    def test_single_stray_point_removed(self):
        table, _ = self.table_and_torso(seed=2)
        stray = np.array([[50.0, 60.0, 140.0]])
        merged = PointCloud(np.vstack([table.points, stray]), CAMERA)
        out = detect_change(table, merged, min_points=2)
        assert not any(np.allclose(p, stray[0]) for p in out.points)

    def test_output_subset_of_current(self):
        rng = np.random.default_rng(3)
        bg = PointCloud(rng.uniform(-100, 100, size=(2000, 3)), CAMERA)
        cur = PointCloud(rng.uniform(-100, 100, size=(2000, 3)), CAMERA)
        out = detect_change(bg, cur, min_points=1)
        cur_set = {tuple(p) for p in cur.points}
        assert all(tuple(p) in cur_set for p in out.points)

    def test_identity_for_various_min_points(self):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.uniform(-50, 50, size=(1000, 3)), CAMERA)
        for n in (1, 2, 5):
            assert len(detect_change(cloud, cloud, min_points=n)) == 0

    def test_frame_mismatch(self):
        a = PointCloud(np.zeros((1, 3)), CAMERA)
        b = PointCloud(np.zeros((1, 3)), WORLD)
        with pytest.raises(FrameMismatchError):
            detect_change(a, b)
