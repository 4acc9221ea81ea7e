import numpy as np
import pytest

from conftest import chain_template
from skinsplat.geom import RigidTransform, axis_angle_to_quat, axis_angle_to_rotation
from skinsplat.template import (
    BipedConfig,
    InvalidStateError,
    KinematicTemplate,
    Pose,
    bone_transforms,
    bone_transforms_axis_angle,
    bone_transforms_axis_angle_vjp,
    build_synthetic_biped,
    lbs_point,
    prior_skinning_query,
)


def brute_force_prior(tpl, x, k=32):
    """Kernel average over the k nearest samples, shifted by the (k+1)-th kernel value."""
    d2 = np.sum((tpl.sample_positions - x) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")
    k = min(k, len(d2) - 1)
    e = np.exp(-(d2[order[: k + 1]] - d2[order[0]]) / (2 * tpl.skinning_sigma**2))
    raw = e[:k] - e[k]
    return raw @ tpl.sample_weights[order[:k]] / raw.sum()


class TestBoneTransforms:
    def test_rest_pose_is_identity(self, biped):
        bones = bone_transforms(biped, Pose.rest(biped.joint_count))
        np.testing.assert_allclose(bones, np.tile(np.eye(4), (biped.joint_count, 1, 1)), atol=1e-15)

    def test_root_only_motion(self):
        tpl = chain_template()
        q = np.array([[1, 0, 0, 0], [1, 0, 0, 0.0]])
        q[0] = axis_angle_to_quat(np.array([0.0, 0.4, 0.0]))
        t = np.array([0.5, -1.0, 2.0])
        bones = bone_transforms(tpl, Pose(q, t))
        expected = RigidTransform(axis_angle_to_rotation(np.array([0.0, 0.4, 0.0])), t).matrix()
        np.testing.assert_allclose(bones[0], expected, atol=1e-12)
        np.testing.assert_allclose(bones[1], expected, atol=1e-12)

    def test_chain_quarter_turn(self):
        tpl = chain_template()
        pose = Pose.from_axis_angle([[0, 0, np.pi / 2], [0, 0, 0]])
        bones = bone_transforms(tpl, pose)
        np.testing.assert_allclose((bones[1] @ [1, 0, 0, 1])[:3], [0, 1, 0], atol=1e-12)

    def test_length_mismatch(self, biped):
        with pytest.raises(ValueError):
            bone_transforms(biped, Pose.rest(3))

    def test_global_rigid_equivariance(self, biped):
        rng = np.random.default_rng(0)
        aa = rng.normal(scale=0.4, size=(biped.joint_count, 3))
        t = rng.normal(size=3)
        tr = RigidTransform.from_axis_angle(rng.normal(size=3), rng.normal(size=3))
        base = bone_transforms_axis_angle(biped, aa, t)
        # pre-compose the root: rotation T_R R_root, translation T_R t + T_t
        aa2 = aa.copy()
        from skinsplat.geom import rotation_to_axis_angle

        aa2[biped.root] = rotation_to_axis_angle(tr.rotation @ axis_angle_to_rotation(aa[biped.root]))
        # the root joint sits at the origin in the biped rest pose
        moved = bone_transforms_axis_angle(biped, aa2, tr.apply(t))
        np.testing.assert_allclose(moved, tr.matrix() @ base, atol=1e-9)

    def test_vjp_matches_finite_differences(self, biped):
        rng = np.random.default_rng(1)
        aa, t = rng.normal(scale=0.3, size=(biped.joint_count, 3)), rng.normal(size=3)
        g = rng.normal(size=(biped.joint_count, 4, 4))

        def f(a, tt):
            return np.sum(g * bone_transforms_axis_angle(biped, a, tt))

        daa, dt = bone_transforms_axis_angle_vjp(biped, aa, t, g)
        h = 1e-6
        for k, c in [(0, 0), (4, 1), (8, 2), (10, 0)]:
            e = np.zeros_like(aa)
            e[k, c] = h
            assert abs((f(aa + e, t) - f(aa - e, t)) / (2 * h) - daa[k, c]) < 1e-6
        for c in range(3):
            e = np.zeros(3)
            e[c] = h
            assert abs((f(aa, t + e) - f(aa, t - e)) / (2 * h) - dt[c]) < 1e-6


class TestLBS:
    def test_identity_bones(self):
        bones = np.tile(np.eye(4), (3, 1, 1))
        np.testing.assert_allclose(lbs_point([1, 2, 3], [0.2, 0.3, 0.5], bones), [1, 2, 3])

    def test_single_bone(self):
        t = RigidTransform.from_axis_angle([0, 0.5, 0], [1, 0, 0])
        bones = [RigidTransform(), t]
        np.testing.assert_allclose(lbs_point([0.3, 0.2, 0.1], [0, 1], bones), t.apply([0.3, 0.2, 0.1]))

    def test_translation_blend(self):
        bones = [RigidTransform(np.eye(3), [1, 0, 0]), RigidTransform(np.eye(3), [0, 1, 0])]
        np.testing.assert_allclose(lbs_point([0, 0, 0], [0.5, 0.5], bones), [0.5, 0.5, 0])

    def test_homogeneous_blend_is_linear(self):
        rng = np.random.default_rng(2)
        bones = np.stack([RigidTransform.from_axis_angle(rng.normal(size=3), rng.normal(size=3)).matrix() for _ in range(3)])
        w = rng.uniform(size=3)
        blend = np.einsum("k,kij->ij", 2.5 * w, bones)
        np.testing.assert_allclose(blend, 2.5 * np.einsum("k,kij->ij", w, bones), atol=1e-14)
        x = rng.normal(size=3)
        np.testing.assert_allclose(lbs_point(x, 2.5 * w, bones), blend[:3, :3] @ x + blend[:3, 3], atol=1e-12)


class TestPriorSkinning:
    def test_at_isolated_sample(self):
        samples = np.array([[0.0, 0, 0], [5.0, 0, 0], [0, 5.0, 0], [0, 0, 5.0]])
        weights = np.array([[1.0, 0], [0, 1.0], [0.3, 0.7], [0, 1.0]])
        tpl = chain_template(samples, weights, sigma=0.1)
        np.testing.assert_allclose(prior_skinning_query(tpl, samples[2]), weights[2], atol=1e-12)

    def test_matches_brute_force(self, biped):
        rng = np.random.default_rng(3)
        lo, hi = biped.bounds()
        for x in rng.uniform(lo - 0.1, hi + 0.1, size=(25, 3)):
            np.testing.assert_allclose(prior_skinning_query(biped, x), brute_force_prior(biped, x), atol=1e-10)

    def test_normalized_and_nonnegative(self, biped):
        rng = np.random.default_rng(4)
        w = biped.prior_skinning(rng.uniform(-1, 1, size=(500, 3)))
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)

    def test_far_point_follows_nearest_bone(self, biped):
        hand = biped.capsules[4].end + np.array([2.0, 0.0, 0.0])
        assert np.argmax(prior_skinning_query(biped, hand)) == 4
        assert np.argmax(brute_force_prior(biped, hand)) == 4

    def test_continuity(self, biped):
        rng = np.random.default_rng(5)
        x = rng.uniform(-0.5, 0.5, size=(200, 3))
        d = rng.normal(size=(200, 3))
        d *= 1e-6 / np.linalg.norm(d, axis=1, keepdims=True)
        assert np.abs(biped.prior_skinning(x) - biped.prior_skinning(x + d)).max() < 1e-3

    def test_gradient_matches_finite_differences(self, biped):
        rng = np.random.default_rng(6)
        x = biped.sample_positions[rng.choice(len(biped.sample_positions), 10)] + rng.normal(scale=0.02, size=(10, 3))
        _, jac = biped.prior_skinning(x, with_grad=True)
        h = 1e-7
        for c in range(3):
            e = np.zeros(3)
            e[c] = h
            fd = (biped.prior_skinning(x + e) - biped.prior_skinning(x - e)) / (2 * h)
            np.testing.assert_allclose(jac[:, :, c], fd, atol=1e-5)

    def test_no_samples_is_invalid_state(self):
        tpl = chain_template(np.zeros((0, 3)), np.zeros((0, 2)))
        with pytest.raises(InvalidStateError):
            prior_skinning_query(tpl, [0, 0, 0])


class TestBiped:
    def test_default_shape(self):
        tpl = build_synthetic_biped()
        assert tpl.joint_count == 11
        assert np.sum(tpl.parents < 0) == 1

    def test_deterministic(self):
        a, b = build_synthetic_biped(BipedConfig(seed=3)), build_synthetic_biped(BipedConfig(seed=3))
        assert np.array_equal(a.sample_positions, b.sample_positions)
        assert np.array_equal(a.sample_weights, b.sample_weights)

    def test_density_doubles_samples(self):
        a = build_synthetic_biped(BipedConfig(sample_density=400))
        b = build_synthetic_biped(BipedConfig(sample_density=800))
        ca = np.bincount(np.argmax(a.sample_weights, 1), minlength=11)
        cb = np.bincount(np.argmax(b.sample_weights, 1), minlength=11)
        assert np.all(np.abs(cb - 2 * ca) <= 1)

    def test_nonpositive_dimension(self):
        with pytest.raises(ValueError):
            build_synthetic_biped(BipedConfig(thigh_length=0.0))

    def test_bad_parent_forest(self):
        with pytest.raises(ValueError):
            KinematicTemplate(np.array([-1, -1]), np.tile(np.eye(4), (2, 1, 1)), np.zeros((1, 3)), np.array([[1.0, 0]]), 0.1)
