import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from skinsplat.geom import (
    Affine,
    Quaternion,
    RigidTransform,
    UnsupportedDegreeError,
    affine_apply,
    axis_angle_to_rotation,
    axis_angle_to_rotation_jacobian,
    covariance_from_rotation_scale,
    polar_rotation,
    quat_multiply,
    quat_to_rotation,
    rotation_to_quat,
    sh_eval,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


def rot_z(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])


class TestQuaternion:
    def test_identity(self):
        np.testing.assert_allclose(quat_to_rotation([1, 0, 0, 0]), np.eye(3), atol=1e-15)

    def test_pi_about_z(self):
        np.testing.assert_allclose(quat_to_rotation([0, 0, 0, 1]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)

    def test_scaled_input_is_normalized(self):
        np.testing.assert_allclose(quat_to_rotation([2, 0, 0, 0]), np.eye(3), atol=1e-15)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            quat_to_rotation([0, 0, 0, 0])

    def test_normalize_method(self):
        q = Quaternion(3, 0, 4, 0).normalize()
        assert abs(q.norm() - 1) < 1e-9
        np.testing.assert_allclose(q.as_array(), [0.6, 0, 0.8, 0])

    @given(quats)
    def test_rotation_is_proper_orthonormal(self, q):
        r = quat_to_rotation(q)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(r) - 1) < 1e-9

    @given(quats)
    def test_double_cover(self, q):
        np.testing.assert_allclose(quat_to_rotation(q), quat_to_rotation(-q), atol=1e-12)

    @given(quats, quats)
    def test_hamilton_product_matches_matrix_product(self, a, b):
        np.testing.assert_allclose(
            quat_to_rotation(quat_multiply(a, b)), quat_to_rotation(a) @ quat_to_rotation(b), atol=1e-9
        )

    @given(quats)
    def test_rotation_to_quat_round_trip(self, q):
        r = quat_to_rotation(q)
        np.testing.assert_allclose(quat_to_rotation(rotation_to_quat(r)), r, atol=1e-9)


class TestRigid:
    def test_compose_associative(self):
        rng = np.random.default_rng(0)
        a, b, c = (RigidTransform.from_axis_angle(rng.normal(size=3), rng.normal(size=3)) for _ in range(3))
        left = (a @ b) @ c
        right = a @ (b @ c)
        np.testing.assert_allclose(left.matrix(), right.matrix(), atol=1e-9)

    def test_inverse(self):
        t = RigidTransform.from_axis_angle([0.3, -0.2, 0.5], [1, 2, 3])
        np.testing.assert_allclose((t @ t.inverse()).matrix(), np.eye(4), atol=1e-12)

    def test_axis_angle_jacobian_matches_finite_differences(self):
        w = np.array([[0.3, -0.4, 0.2], [1e-9, 0.0, 0.0]])
        jac = axis_angle_to_rotation_jacobian(w)
        h = 1e-6
        for c in range(3):
            e = np.zeros(3)
            e[c] = h
            fd = (axis_angle_to_rotation(w + e) - axis_angle_to_rotation(w - e)) / (2 * h)
            np.testing.assert_allclose(jac[..., c], fd, atol=1e-7)


class TestCovariance:
    def test_identity_rotation(self):
        np.testing.assert_allclose(covariance_from_rotation_scale(np.eye(3), [1, 2, 3]), np.diag([1.0, 4, 9]))

    def test_quarter_turn_about_z(self):
        np.testing.assert_allclose(
            covariance_from_rotation_scale(rot_z(90), [1, 2, 1]), np.diag([4.0, 1, 1]), atol=1e-12
        )

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            covariance_from_rotation_scale(np.eye(3), [1, 0, 1])

    @settings(max_examples=50)
    @given(quats, arrays(np.float64, 3, elements=st.floats(0.01, 5)), quats)
    def test_spd_and_rotation_equivariant(self, q, s, q1):
        r, r1 = quat_to_rotation(q), quat_to_rotation(q1)
        cov = covariance_from_rotation_scale(r, s)
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(cov).min() > 0
        np.testing.assert_allclose(covariance_from_rotation_scale(r1 @ r, s), r1 @ cov @ r1.T, atol=1e-9)


class TestSphericalHarmonics:
    def test_degree0_constant(self):
        rng = np.random.default_rng(1)
        d = rng.normal(size=(20, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        vals = sh_eval(0, d)
        assert vals.shape == (20, 1)
        assert np.all(vals == vals[0])
        np.testing.assert_allclose(vals[0, 0], 0.5 / np.sqrt(np.pi), atol=1e-12)
        assert abs(vals[0, 0] - 0.282095) < 1e-6

    def test_degree1_z_entry(self):
        vals = sh_eval(1, np.array([0.0, 0.0, 1.0]))
        assert np.isclose(np.abs(vals).max(), np.sqrt(3 / (4 * np.pi)))
        assert abs(np.sqrt(3 / (4 * np.pi)) - 0.488603) < 1e-6

    @pytest.mark.parametrize("deg", [0, 1, 2, 3])
    def test_lengths(self, deg):
        assert sh_eval(deg, np.array([0.0, 1.0, 0.0])).shape[-1] == (deg + 1) ** 2

    def test_degree_above_three(self):
        with pytest.raises(UnsupportedDegreeError):
            sh_eval(4, np.array([0.0, 0.0, 1.0]))

    def test_orthonormal_basis(self):
        # Monte Carlo Gram matrix over the sphere approximates the identity
        rng = np.random.default_rng(2)
        d = rng.normal(size=(200000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        y = sh_eval(3, d)
        gram = 4 * np.pi * (y.T @ y) / len(d)
        np.testing.assert_allclose(gram, np.eye(16), atol=0.03)


class TestAffine:
    def test_identity(self):
        np.testing.assert_allclose(affine_apply(Affine(), [1, 2, 3]), [1, 2, 3])

    def test_scaling(self):
        np.testing.assert_allclose(affine_apply(Affine(2 * np.eye(3)), [1, 0, 0]), [2, 0, 0])

    def test_blend_of_translations(self):
        m = 0.5 * RigidTransform(np.eye(3), [1, 0, 0]).matrix() + 0.5 * RigidTransform(np.eye(3), [0, 1, 0]).matrix()
        np.testing.assert_allclose(affine_apply(Affine.from_matrix(m), [0, 0, 0]), [0.5, 0.5, 0])


def test_polar_of_rotation_times_spd():
    rng = np.random.default_rng(3)
    r = axis_angle_to_rotation(rng.normal(size=3))
    b = rng.normal(size=(3, 3))
    spd = b @ b.T + 3 * np.eye(3)
    p, _ = polar_rotation((r @ spd)[None])
    np.testing.assert_allclose(p[0], r, atol=1e-10)
