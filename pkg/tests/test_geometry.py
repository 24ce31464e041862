"""Geometry tests: every derived value is checked against an independent
oracle (homogeneous 4x4 matrix algebra, scipy matrix logarithm, central
finite differences) rather than against the implementation under test."""

import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from voxtrack import geometry as geo
from voxtrack.geometry import Camera, Pose


def random_pose(rng) -> Pose:
    q = rng.normal(size=4)
    return Pose(q, rng.normal(size=3))


def se3_matrix_exp(twist: np.ndarray) -> np.ndarray:
    """Oracle: matrix exponential of the 4x4 twist hat matrix."""
    w, v = twist[:3], twist[3:]
    xi_hat = np.zeros((4, 4))
    xi_hat[:3, :3] = np.array(
        [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
    )
    xi_hat[:3, 3] = v
    return scipy.linalg.expm(xi_hat)


def se3_matrix_log(m: np.ndarray) -> np.ndarray:
    """Oracle: twist (w, v) from the matrix logarithm of a 4x4 transform."""
    xi_hat = scipy.linalg.logm(m)
    w = np.array([xi_hat[2, 1], xi_hat[0, 2], xi_hat[1, 0]]).real
    return np.concatenate([w, xi_hat[:3, 3].real])


class TestExp:
    def test_zero_twist_is_identity(self):
        p = geo.exp(np.zeros(6))
        assert np.allclose(p.q, [1, 0, 0, 0])
        assert np.allclose(p.t, 0)

    def test_pi_about_z_flips_xy(self):
        p = geo.exp([0, 0, math.pi, 0, 0, 0])
        # Rodrigues oracle: R = I + sin(pi) W + (1-cos(pi)) W^2 = diag(-1,-1,1)
        r = p.rotation_matrix()
        assert np.allclose(r, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)
        assert np.allclose(p.t, 0)

    def test_pure_translation(self):
        p = geo.exp([0, 0, 0, 1, 2, 3])
        assert np.allclose(p.q, [1, 0, 0, 0])
        assert np.allclose(p.t, [1, 2, 3])

    def test_matches_matrix_exponential(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            xi = rng.normal(size=6)
            m = geo.exp(xi).matrix()
            assert np.allclose(m, se3_matrix_exp(xi), atol=1e-10)

    def test_log_roundtrip(self):
        # log(exp(xi)) = xi within 1e-7 for twists below norm 1, with the
        # matrix logarithm as the independent inverse.
        rng = np.random.default_rng(1)
        for _ in range(300):
            xi = rng.normal(size=6)
            xi *= rng.uniform(0, 0.999) / max(np.linalg.norm(xi), 1e-12)
            back = se3_matrix_log(geo.exp(xi).matrix())
            assert np.allclose(back, xi, atol=1e-7)

    def test_unit_norm_across_magnitudes(self):
        rng = np.random.default_rng(2)
        mags = np.concatenate(
            [
                np.array([0.0, 1e-10, 1e-6, math.pi - 1e-6]),
                rng.uniform(0, math.pi, size=10_000),
            ]
        )
        for m in mags:
            axis = rng.normal(size=3)
            axis /= max(np.linalg.norm(axis), 1e-300)
            p = geo.exp(np.concatenate([m * axis, rng.normal(size=3)]))
            assert abs(np.linalg.norm(p.q) - 1.0) < 1e-12


class TestComposeInverse:
    def test_identity_neutral(self):
        p = random_pose(np.random.default_rng(3))
        q = geo.compose(p, Pose.identity())
        assert np.allclose(q.q, p.q, atol=1e-15)
        assert np.allclose(q.t, p.t, atol=1e-15)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = random_pose(rng)
            e = geo.compose(p, geo.inverse(p))
            assert geo.rotation_angle(e) < 1e-9
            assert np.linalg.norm(e.t) < 1e-9

    def test_compose_matches_matrix_product(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = random_pose(rng), random_pose(rng)
            assert np.allclose(geo.compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)

    def test_inverse_matches_matrix_inverse(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            p = random_pose(rng)
            assert np.allclose(geo.inverse(p).matrix(), np.linalg.inv(p.matrix()), atol=1e-12)

    def test_inverse_of_pure_translation(self):
        p = Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, -2.0, 0.5]))
        pi = geo.inverse(p)
        assert np.allclose(pi.t, [-1.0, 2.0, -0.5])

    def test_associativity(self):
        rng = np.random.default_rng(7)
        a, b, c = (random_pose(rng) for _ in range(3))
        lhs = geo.compose(geo.compose(a, b), c)
        rhs = geo.compose(a, geo.compose(b, c))
        assert geo.relative_rotation_angle(lhs, rhs) < 1e-9
        assert np.linalg.norm(lhs.t - rhs.t) < 1e-9


class TestTransformPoint:
    def test_identity(self):
        assert np.allclose(geo.transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])

    def test_translation_only(self):
        p = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 5.0]))
        assert np.allclose(geo.transform_point(p, [0, 0, 0]), [0, 0, 5])

    def test_matches_homogeneous_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            p, x = random_pose(rng), rng.normal(size=3)
            expected = (p.matrix() @ np.append(x, 1.0))[:3]
            assert np.allclose(geo.transform_point(p, x), expected, atol=1e-12)
            assert np.allclose(geo.transform_points(p, x[None, :])[0], expected, atol=1e-12)

    def test_compose_action(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a, b, x = random_pose(rng), random_pose(rng), rng.normal(size=3)
            lhs = geo.transform_point(geo.compose(a, b), x)
            rhs = geo.transform_point(a, geo.transform_point(b, x))
            assert np.allclose(lhs, rhs, atol=1e-9)


@settings(derandomize=True, max_examples=50)
@given(st.lists(st.floats(-0.9, 0.9), min_size=6, max_size=6))
def test_exp_always_unit_norm(xi):
    p = geo.exp(np.array(xi))
    assert abs(np.linalg.norm(p.q) - 1.0) < 1e-12


class TestProjection:
    cam = Camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

    def test_optical_axis(self):
        assert np.allclose(geo.project(self.cam, [0, 0, 1]), [320, 240])

    def test_behind_camera_raises(self):
        with pytest.raises(geo.PointBehindCamera):
            geo.project(self.cam, [0, 0, -1.0])

    def test_formula(self):
        uv = geo.project(self.cam, [0.1, -0.2, 2.0])
        assert np.allclose(uv, [345.0, 190.0])

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(10)
        pts = rng.uniform([-1, -1, 0.5], [1, 1, 5], size=(200, 3))
        uv, ok = geo.project_points(self.cam, pts)
        assert ok.all()
        for i in range(200):
            assert np.allclose(uv[i], geo.project(self.cam, pts[i]))

    def test_jacobian_unit_depth(self):
        cam = Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
        j = geo.projection_jacobian(cam, [0, 0, 1.0])
        assert np.allclose(j, [[1, 0, 0], [0, 1, 0]])

    def test_jacobian_depth_scaling(self):
        j1 = geo.projection_jacobian(self.cam, [0.2, 0.3, 1.0])
        j2 = geo.projection_jacobian(self.cam, [0.2, 0.3, 2.0])
        assert np.allclose(j2[:, :2], j1[:, :2] / 2.0)

    def test_jacobian_vs_finite_differences(self):
        # central differences at step 1e-6, max relative error 1e-5
        rng = np.random.default_rng(11)
        h = 1e-6
        worst = 0.0
        for _ in range(1000):
            x = rng.uniform([-0.8, -0.6, 0.3], [0.8, 0.6, 6.0])
            j = geo.projection_jacobian(self.cam, x)
            fd = np.zeros((2, 3))
            for k in range(3):
                dx = np.zeros(3)
                dx[k] = h
                fd[:, k] = (geo.project(self.cam, x + dx) - geo.project(self.cam, x - dx)) / (
                    2 * h
                )
            scale = max(np.abs(j).max(), 1.0)
            worst = max(worst, np.abs(j - fd).max() / scale)
        assert worst < 1e-5


class TestSerialization:
    def test_roundtrip_full_precision(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            p = random_pose(rng)
            fields = geo.pose_to_csv_fields(p)
            q = geo.pose_from_csv_fields(fields)
            assert np.array_equal(p.q, q.q)
            assert np.array_equal(p.t, q.t)

    def test_field_order(self):
        p = Pose(np.array([1.0, 0, 0, 0]), np.array([1.5, 2.5, -3.5]))
        fields = geo.pose_to_csv_fields(p)
        assert [float(f) for f in fields] == [1, 0, 0, 0, 1.5, 2.5, -3.5]

    def test_bad_length_rejected(self):
        with pytest.raises(ValueError):
            geo.pose_from_csv_fields(["1", "0", "0"])


class TestCamera:
    def test_invalid_focal(self):
        with pytest.raises(ValueError):
            Camera(fx=-1.0, fy=500.0, cx=320, cy=240, width=640, height=480)

    def test_scaled_consistency(self):
        cam = Camera(fx=500.0, fy=480.0, cx=320.0, cy=240.0, width=640, height=480)
        lvl = cam.scaled(4.0)
        x = np.array([0.23, -0.11, 2.0])
        uv = geo.project(cam, x)
        uv_lvl = geo.project(lvl, x)
        assert np.allclose(uv_lvl, (uv + 0.5) / 4.0 - 0.5, atol=1e-12)
