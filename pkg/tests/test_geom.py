import numpy as np
import pytest
from scipy.optimize import minimize

from robus import geom
from robus.errors import FrameMismatchError, ValidationError
from robus.geom import (
    MRI, CAMERA, WORLD,
    AffineTransform, RigidTransform,
    apply, compose, invert,
    euler_xyz_rotation, format_transform, parse_transform,
    random_rigid, rotation_about_axis, rotation_angle_norm,
)


def I(frame=WORLD):
    return RigidTransform.identity(frame)


def assert_transforms_close(a, b, atol=1e-9):
    np.testing.assert_allclose(a.matrix4(), b.matrix4(), atol=atol)


class TestCompose:
    def test_identity_identity(self):
        assert_transforms_close(compose(I(), I()), I())

    def test_inverse_gives_identity(self):
        rng = np.random.default_rng(0)
        t = random_rigid(rng, MRI, CAMERA)
        got = compose(t, invert(t))
        assert_transforms_close(got, RigidTransform.identity(CAMERA), atol=1e-9)

    def test_two_quarter_turns(self):
        # Rz(90) twice maps (1,0,0) to (-1,0,0).
        rz = RigidTransform(rotation_about_axis([0, 0, 1], 90.0), np.zeros(3), WORLD, WORLD)
        p = apply(compose(rz, rz), [1.0, 0.0, 0.0])
        np.testing.assert_allclose(p, [-1.0, 0.0, 0.0], atol=1e-12)

    def test_frame_mismatch_names_both_frames(self):
        a = RigidTransform.identity(CAMERA, WORLD)
        b = RigidTransform.identity(MRI, MRI)
        with pytest.raises(FrameMismatchError) as exc:
            compose(a, b)
        assert "Camera" in str(exc.value) and "MRI" in str(exc.value)

    def test_matches_matrix_product(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = random_rigid(rng, CAMERA, WORLD)
            b = random_rigid(rng, MRI, CAMERA)
            np.testing.assert_allclose(
                compose(a, b).matrix4(), a.matrix4() @ b.matrix4(), atol=1e-12)


class TestInvert:
    def test_identity(self):
        assert_transforms_close(invert(I()), I())

    def test_pure_translation(self):
        t = RigidTransform(np.eye(3), [1.0, 2.0, 3.0], MRI, WORLD)
        inv = invert(t)
        np.testing.assert_allclose(inv.translation, [-1.0, -2.0, -3.0])
        assert inv.from_frame == WORLD and inv.to_frame == MRI

    def test_roundtrip_on_random_points(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            t = random_rigid(rng, MRI, WORLD)
            p = rng.uniform(-100, 100, size=3)
            np.testing.assert_allclose(apply(invert(t), apply(t, p)), p, atol=1e-9)

    def test_double_invert(self):
        rng = np.random.default_rng(3)
        t = random_rigid(rng, MRI, WORLD)
        assert_transforms_close(invert(invert(t)), t, atol=1e-12)

    def test_invert_equals_matrix_inverse(self):
        rng = np.random.default_rng(4)
        t = random_rigid(rng, MRI, CAMERA)
        np.testing.assert_allclose(
            invert(t).matrix4(), np.linalg.inv(t.matrix4()), atol=1e-10)


def _xyz_angles_oracle(r: np.ndarray) -> np.ndarray:
    """Brute-force fixed-axis XYZ decomposition via direct minimization."""

    def build(v):
        a, b, c = v
        ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
        rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
        ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
        rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
        return rz @ ry @ rx

    def cost(v):
        return float(np.sum((build(v) - r) ** 2))

    best = None
    for start in ([0, 0, 0], [0.5, -0.5, 0.5], [-0.5, 0.5, -0.5]):
        res = minimize(cost, start, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 5000})
        if best is None or res.fun < best.fun:
            best = res
    assert best.fun < 1e-14
    return best.x


class TestRotationAngleNorm:
    def test_identity_is_zero(self):
        assert rotation_angle_norm(I()) == 0.0

    def test_single_axis(self):
        t = RigidTransform(rotation_about_axis([0, 0, 1], 3.0), np.zeros(3), WORLD, WORLD)
        assert rotation_angle_norm(t) == pytest.approx(3.0, abs=1e-9)

    def test_against_bruteforce_decomposition(self):
        r = rotation_about_axis([1, 0, 0], 2.0) @ rotation_about_axis([0, 1, 0], 2.0)
        expected = np.degrees(np.linalg.norm(_xyz_angles_oracle(r)))
        assert rotation_angle_norm(r) == pytest.approx(expected, abs=1e-6)

    def test_euler_constructor_roundtrip(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            ang = rng.uniform(-60, 60, size=3)
            r = euler_xyz_rotation(*ang)
            assert rotation_angle_norm(r) == pytest.approx(np.linalg.norm(ang), abs=1e-9)

    def test_invariant_under_translation_conjugation(self):
        rng = np.random.default_rng(6)
        t = random_rigid(rng, WORLD, WORLD)
        for _ in range(20):
            d = RigidTransform(np.eye(3), rng.uniform(-50, 50, 3), WORLD, WORLD)
            conj = compose(compose(d, t), invert(d))
            assert rotation_angle_norm(conj) == pytest.approx(rotation_angle_norm(t), abs=1e-9)


class TestApply:
    def test_identity(self):
        np.testing.assert_allclose(apply(I(), [5.0, 5.0, 5.0]), [5.0, 5.0, 5.0])

    def test_translation_of_origin(self):
        t = RigidTransform(np.eye(3), [1.0, 0.0, 0.0], WORLD, WORLD)
        np.testing.assert_allclose(apply(t, np.zeros(3)), [1.0, 0.0, 0.0])

    def test_inverse_chain_identity(self):
        # Applying invert(T) is the same map as the oppositely-named transform.
        rng = np.random.default_rng(7)
        t_cam_from_mri = random_rigid(rng, MRI, CAMERA)
        t_mri_from_cam = RigidTransform.from_matrix4(
            np.linalg.inv(t_cam_from_mri.matrix4()), CAMERA, MRI)
        pts = rng.uniform(-80, 80, size=(100, 3))
        np.testing.assert_allclose(
            apply(invert(t_cam_from_mri), pts), apply(t_mri_from_cam, pts), atol=1e-9)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(8)
        t = random_rigid(rng, MRI, WORLD)
        pts = rng.uniform(-10, 10, size=(5, 3))
        batch = apply(t, pts)
        for i in range(5):
            np.testing.assert_allclose(batch[i], apply(t, pts[i]), atol=1e-12)


class TestGroupAxioms:
    def test_axioms_on_random_sample(self):
        rng = np.random.default_rng(9)
        n = 10_000
        ident = I()
        for _ in range(n // 3):
            a = random_rigid(rng, WORLD, WORLD)
            b = random_rigid(rng, WORLD, WORLD)
            c = random_rigid(rng, WORLD, WORLD)
            lhs = compose(compose(a, b), c)
            rhs = compose(a, compose(b, c))
            np.testing.assert_allclose(lhs.matrix4(), rhs.matrix4(), atol=1e-9)
            assert_transforms_close(compose(a, ident), a, atol=1e-12)
            assert_transforms_close(compose(ident, a), a, atol=1e-12)
            assert_transforms_close(compose(a, invert(a)), ident, atol=1e-9)

    def test_long_chain_stays_orthonormal(self):
        rng = np.random.default_rng(10)
        t = I()
        for _ in range(100):
            t = compose(t, random_rigid(rng, WORLD, WORLD))
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9
        np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-9)


class TestConstruction:
    def test_rejects_reflection(self):
        m = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValidationError):
            RigidTransform(m, np.zeros(3), WORLD, WORLD)

    def test_repairs_small_drift(self):
        r = rotation_about_axis([1, 2, 3], 30.0) + 1e-7 * np.ones((3, 3))
        t = RigidTransform(r, np.zeros(3), WORLD, WORLD)
        np.testing.assert_allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-12)

    def test_unknown_frame_rejected(self):
        with pytest.raises(ValidationError):
            RigidTransform(np.eye(3), np.zeros(3), "Spaceship", WORLD)

    def test_immutable_arrays(self):
        t = I()
        with pytest.raises(ValueError):
            t.rotation[0, 0] = 2.0

    def test_affine_singular_rejected(self):
        with pytest.raises(ValidationError):
            AffineTransform(np.zeros((3, 3)), np.zeros(3), WORLD, WORLD)


class TestAffine:
    def test_scaling_apply_and_inverse(self):
        a = AffineTransform(np.diag([2.0, 3.0, 1.0]), [1.0, 0.0, 0.0], MRI, WORLD)
        p = apply(a, [1.0, 1.0, 1.0])
        np.testing.assert_allclose(p, [3.0, 3.0, 1.0])
        np.testing.assert_allclose(apply(invert(a), p), [1.0, 1.0, 1.0], atol=1e-12)

    def test_mixed_compose_is_affine(self):
        rng = np.random.default_rng(11)
        r = random_rigid(rng, MRI, CAMERA)
        a = AffineTransform(np.diag([2.0, 1.0, 1.0]), np.zeros(3), CAMERA, WORLD)
        out = compose(a, r)
        assert isinstance(out, AffineTransform)
        np.testing.assert_allclose(out.matrix4(), a.matrix4() @ r.matrix4(), atol=1e-12)


class TestSerialization:
    def test_roundtrip(self):
        rng = np.random.default_rng(12)
        t = random_rigid(rng, MRI, WORLD)
        back = parse_transform(format_transform(t))
        assert isinstance(back, RigidTransform)
        assert back.from_frame == MRI and back.to_frame == WORLD
        np.testing.assert_allclose(back.matrix4(), t.matrix4(), atol=1e-9)

    def test_affine_roundtrip(self):
        a = AffineTransform(np.diag([0.2, 0.21, 1.0]), [-38.0, -10.0, 0.0],
                            geom.US, geom.TOOL)
        back = parse_transform(format_transform(a))
        assert isinstance(back, AffineTransform)
        np.testing.assert_allclose(back.matrix4(), a.matrix4(), atol=1e-9)

    def test_rejects_garbage(self):
        with pytest.raises(ValidationError):
            parse_transform("rigid from=MRI to=World\n1 2 3")
