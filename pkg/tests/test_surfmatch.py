import numpy as np
import pytest

from robus.errors import (
    DegenerateInputError, EmptyInputError, NoCorrespondencesError,
)
from robus.geom import (
    CAMERA, MRI, RigidTransform, compose, invert,
    rotation_about_axis, rotation_angle_norm, translation_norm,
)
from robus.surfmatch import (
    IcpParams, NearestNeighborIndex, estimate_normals, fit_rigid, icp, nn_query,
)
from robus.volume import PointCloud


def ellipsoid_cloud(n=2000, axes=(42.0, 36.0, 28.0), seed=0, frame=MRI):
    """Torso-scale test surface with a bump to break symmetry."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = u * np.array(axes)
    bump = u[:, 2] > 0.8
    pts[bump] *= 1.15
    return PointCloud(pts, frame)


class TestNearestNeighbor:
    def test_single_point(self):
        idx = NearestNeighborIndex(np.array([[0.0, 0.0, 0.0]]))
        point, dist = nn_query(idx, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(point, [0.0, 0.0, 0.0])
        assert dist == pytest.approx(np.sqrt(3.0))

    def test_query_at_indexed_point(self):
        pts = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        idx = NearestNeighborIndex(pts)
        point, dist = nn_query(idx, [4.0, 5.0, 6.0])
        assert dist == 0.0
        np.testing.assert_allclose(point, [4.0, 5.0, 6.0])

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-100, 100, size=(2000, 3))
        idx = NearestNeighborIndex(pts)
        for q in rng.uniform(-100, 100, size=(200, 3)):
            point, dist = nn_query(idx, q)
            scan = np.linalg.norm(pts - q, axis=1)
            best = int(np.argmin(scan))
            np.testing.assert_array_equal(point, pts[best])
            assert dist == pytest.approx(scan[best], rel=1e-12)

    def test_tie_broken_by_insertion_order(self):
        pts = np.array([
            [5.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
        ])
        idx = NearestNeighborIndex(pts)
        point, dist = nn_query(idx, [0.0, 0.0, 0.0])
        assert dist == 1.0
        # indices 1, 2, 3 all tie at distance 1; lowest wins
        np.testing.assert_array_equal(point, pts[1])

    def test_empty_index_raises(self):
        with pytest.raises(EmptyInputError):
            NearestNeighborIndex(np.zeros((0, 3)))


def quaternion_absolute_orientation(src: np.ndarray, dst: np.ndarray):
    """Closed-form Horn (1987) solution, independent of the SVD path."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    a = src - cs
    b = dst - cd
    m = a.T @ b
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(n)
    q = vecs[:, np.argmax(vals)]
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    t = cd - r @ cs
    return r, t


class TestFitRigid:
    def test_matches_quaternion_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            src = rng.uniform(-50, 50, size=(40, 3))
            r_true = rotation_about_axis(rng.normal(size=3), rng.uniform(-170, 170))
            t_true = rng.uniform(-30, 30, size=3)
            dst = src @ r_true.T + t_true + rng.normal(0, 0.5, size=src.shape)
            r_svd, t_svd = fit_rigid(src, dst)
            r_q, t_q = quaternion_absolute_orientation(src, dst)
            np.testing.assert_allclose(r_svd, r_q, atol=1e-9)
            np.testing.assert_allclose(t_svd, t_q, atol=1e-9)

    def test_exact_on_noiseless(self):
        rng = np.random.default_rng(2)
        src = rng.uniform(-50, 50, size=(10, 3))
        r_true = rotation_about_axis([1, 2, 0], 33.0)
        dst = src @ r_true.T + np.array([5.0, -2.0, 1.0])
        r, t = fit_rigid(src, dst)
        np.testing.assert_allclose(r, r_true, atol=1e-12)
        np.testing.assert_allclose(t, [5.0, -2.0, 1.0], atol=1e-12)


def transform_error(result: RigidTransform, truth: RigidTransform):
    delta = compose(result, invert(truth))
    return translation_norm(delta), rotation_angle_norm(delta)


class TestIcp:
    def test_self_alignment(self):
        cloud = ellipsoid_cloud(seed=3)
        target = PointCloud(cloud.points, CAMERA)
        res = icp(cloud, target, IcpParams(initial=RigidTransform.identity(MRI, CAMERA)))
        assert res.converged
        assert res.iterations <= 2
        np.testing.assert_allclose(res.transform.matrix4(), np.eye(4), atol=1e-9)

    def test_recovers_known_displacement(self):
        cloud = ellipsoid_cloud(seed=4)
        truth = RigidTransform(rotation_about_axis([0, 0, 1], 5.0),
                               [10.0, 5.0, 0.0], MRI, CAMERA)
        target = PointCloud(cloud.points @ truth.rotation.T + truth.translation, CAMERA)
        res = icp(cloud, target, IcpParams(initial=RigidTransform.identity(MRI, CAMERA)))
        dt, dr = transform_error(res.transform, truth)
        assert dt < 0.1 and dr < 0.1

    def test_outliers_rejected(self):
        rng = np.random.default_rng(5)
        cloud = ellipsoid_cloud(seed=5)
        truth = RigidTransform(rotation_about_axis([0, 1, 0], 4.0),
                               [8.0, -3.0, 2.0], MRI, CAMERA)
        aligned = cloud.points @ truth.rotation.T + truth.translation
        n_out = int(0.3 * len(aligned))
        dirs = rng.normal(size=(n_out, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        outliers = dirs * rng.uniform(150, 300, size=(n_out, 1))
        target = PointCloud(np.vstack([aligned, outliers]), CAMERA)
        res = icp(cloud, target, IcpParams(initial=RigidTransform.identity(MRI, CAMERA)))
        dt, dr = transform_error(res.transform, truth)
        assert dt < 0.5

    def test_prealign_handles_gross_misalignment(self):
        cloud = ellipsoid_cloud(seed=6)
        truth = RigidTransform(rotation_about_axis([0.3, 1, 0.1], 85.0),
                               [120.0, -60.0, 40.0], MRI, CAMERA)
        target = PointCloud(cloud.points @ truth.rotation.T + truth.translation, CAMERA)
        res = icp(cloud, target, IcpParams(max_pair_distance=1e9))
        dt, dr = transform_error(res.transform, truth)
        assert dt < 0.5 and dr < 0.5

    def test_rms_non_increasing_on_clean_data(self):
        cloud = ellipsoid_cloud(seed=7)
        truth = RigidTransform(rotation_about_axis([1, 0, 0], 6.0), [6.0, 6.0, -4.0],
                               MRI, CAMERA)
        target = PointCloud(cloud.points @ truth.rotation.T + truth.translation, CAMERA)
        res = icp(cloud, target, IcpParams(initial=RigidTransform.identity(MRI, CAMERA)))
        diffs = np.diff(res.rms_history)
        assert np.all(diffs <= 1e-9)

    def test_equivariance_under_rotation(self):
        cloud = ellipsoid_cloud(seed=8)
        truth = RigidTransform(rotation_about_axis([0, 0, 1], 7.0), [5.0, 2.0, 1.0],
                               MRI, CAMERA)
        target_pts = cloud.points @ truth.rotation.T + truth.translation
        base = icp(cloud, PointCloud(target_pts, CAMERA),
                   IcpParams(initial=RigidTransform.identity(MRI, CAMERA)))

        r = rotation_about_axis([1, 1, 1], 30.0)
        rot_src = PointCloud(cloud.points @ r.T, MRI)
        rot_tgt = PointCloud(target_pts @ r.T, CAMERA)
        conj_init = RigidTransform(r @ np.eye(3) @ r.T, np.zeros(3), MRI, CAMERA)
        rres = icp(rot_src, rot_tgt, IcpParams(initial=conj_init))
        expected_rot = r @ base.transform.rotation @ r.T
        np.testing.assert_allclose(rres.transform.rotation, expected_rot, atol=1e-6)

    def test_degenerate_cloud_raises(self):
        line = PointCloud(np.outer(np.linspace(0, 1, 10), [1.0, 0.0, 0.0]), MRI)
        good = ellipsoid_cloud(seed=9, frame=CAMERA)
        with pytest.raises(DegenerateInputError):
            icp(line, good)

    def test_no_correspondences_raises(self):
        a = ellipsoid_cloud(seed=10)
        far = PointCloud(a.points + 1000.0, CAMERA)
        with pytest.raises(NoCorrespondencesError):
            icp(a, far, IcpParams(initial=RigidTransform.identity(MRI, CAMERA),
                                  max_pair_distance=10.0))


class TestEstimateNormals:
    def test_sphere_normals(self):
        rng = np.random.default_rng(11)
        u = rng.normal(size=(1500, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        pts = 40.0 * u
        normals = estimate_normals(pts, k=10, orient_toward=[0.0, 0.0, 1000.0])
        upper = pts[:, 2] > 5.0
        radial = u[upper]
        agreement = np.einsum("ij,ij->i", normals[upper], radial)
        assert np.mean(agreement > np.cos(np.radians(15.0))) > 0.9
