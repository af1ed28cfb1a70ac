import numpy as np
import pytest

from nfreg import autodiff as ad
from nfreg.exceptions import InvalidInputError
from nfreg.geometry import RigidTransform
from nfreg.skeleton import (
    BoneSpec,
    PoseShapeParams,
    SkeletonSpec,
    build_template,
    compose_rigid,
    default_skeleton,
    pose_points,
    pose_template,
    pose_template_tensor,
    skinning_weights,
)


def single_bone():
    return SkeletonSpec((BoneSpec("root", None, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 0.1, (3.2, 3.2, 3.2)),))


def random_params(template, seed, fraction=0.8):
    rng = np.random.default_rng(seed)
    n = template.n_bones
    return PoseShapeParams(
        joint_rotations=rng.uniform(-1, 1, size=(n, 3)) * template.skeleton.limits * fraction,
        global_rotation=rng.normal(size=3),
        translation=rng.normal(size=3),
        length_scales=rng.uniform(0.8, 1.2, size=n),
        radius_scales=rng.uniform(0.8, 1.2, size=n),
    )


class TestSkeletonSpec:
    def test_default_has_twelve_bones(self):
        skel = default_skeleton()
        assert skel.n_bones == 12
        assert skel.limits[1].tolist() == [0.4, 0.4, 0.4]

    def test_two_roots_rejected(self):
        bone = BoneSpec("a", None, (0, 0, 0), (0, 1, 0), 0.1, (1, 1, 1))
        with pytest.raises(InvalidInputError):
            SkeletonSpec((bone, bone))

    def test_parent_must_precede_child(self):
        root = BoneSpec("a", None, (0, 0, 0), (0, 1, 0), 0.1, (1, 1, 1))
        child = BoneSpec("b", 1, (0, 1, 0), (0, 1, 0), 0.1, (1, 1, 1))
        with pytest.raises(InvalidInputError):
            SkeletonSpec((root, child))

    def test_radius_positive(self):
        with pytest.raises(InvalidInputError):
            SkeletonSpec((BoneSpec("a", None, (0, 0, 0), (0, 1, 0), 0.0, (1, 1, 1)),))

    def test_dict_round_trip(self):
        skel = default_skeleton()
        assert SkeletonSpec.from_dict(skel.to_dict()) == skel


class TestTemplate:
    def test_deterministic(self):
        a = build_template(m=60, seed=3)
        b = build_template(m=60, seed=3)
        assert np.array_equal(a.rest_vertices, b.rest_vertices)
        assert a.digest() == b.digest()

    def test_weights_are_normalized(self, template):
        assert np.all(template.weights >= 0)
        assert np.abs(template.weights.sum(axis=1) - 1).max() < 1e-9
        assert np.all((template.weights > 0).sum(axis=1) <= 2)

    def test_single_bone_weights(self):
        t = build_template(single_bone(), m=20, seed=0, knn_k=4)
        assert np.array_equal(t.weights, np.ones((20, 1)))

    def test_too_few_vertices(self):
        with pytest.raises(InvalidInputError):
            build_template(m=47)

    def test_midsection_weight(self):
        # lower left leg midsection, on the capsule surface
        point = np.array([[0.1, 0.30, 0.055]])
        weights = skinning_weights(default_skeleton(), point)
        assert weights[0, 9] > 0.99


class TestPose:
    def test_rest_pose(self, template):
        posed = pose_template(template, PoseShapeParams.rest(template.n_bones))
        assert np.abs(posed - template.rest_vertices).max() < 1e-12

    def test_translation_only(self, template):
        t = np.array([0.3, -1.0, 2.0])
        posed = pose_template(template, PoseShapeParams.rest(template.n_bones, translation=t))
        assert np.allclose(posed, template.rest_vertices + t, atol=1e-12)

    def test_quarter_turn_about_z(self):
        skel = single_bone()
        params = PoseShapeParams.rest(1)
        params.joint_rotations = np.array([[0.0, 0.0, np.pi / 2]])
        out = pose_points(skel, np.array([[1.0, 0.0, 0.0]]), np.ones((1, 1)), params.to_store()).value
        assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-9)

    def test_limits_are_checked(self, template):
        params = PoseShapeParams.rest(template.n_bones)
        params.joint_rotations[1, 0] = 0.5
        with pytest.raises(InvalidInputError):
            pose_template(template, params)
        params.project(template.skeleton)
        assert params.joint_rotations[1, 0] == 0.4

    def test_scales_are_checked(self, template):
        params = PoseShapeParams.rest(template.n_bones)
        params.length_scales[0] = 2.5
        with pytest.raises(InvalidInputError):
            params.check(template.skeleton)

    def test_rigid_composition(self, template):
        params = random_params(template, 0)
        c, s = np.cos(0.7), np.sin(0.7)
        transform = RigidTransform(np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]]), np.array([0.1, 0.2, -0.3]))
        expected = transform.apply(pose_template(template, params))
        assert np.allclose(pose_template(template, compose_rigid(params, transform)), expected, atol=1e-9)

    def test_matches_finite_differences(self, template):
        params = random_params(template, 1).to_store()
        weights = np.random.default_rng(2).normal(size=(template.n_vertices, 3))

        def objective(p):
            return ad.tsum(pose_template_tensor(template, p) * weights)

        analytic = ad.grad(objective, params)
        h = 1e-5
        for k in params:
            for i in range(params[k].size):
                plus, minus = params.copy(), params.copy()
                plus[k].reshape(-1)[i] += h
                minus[k].reshape(-1)[i] -= h
                fd = (objective(plus).value - objective(minus).value) / (2 * h)
                assert abs(analytic[k].reshape(-1)[i] - fd) <= 1e-4 * max(1.0, abs(fd)), (k, i)

    def test_dict_round_trip(self, template):
        params = random_params(template, 3)
        again = PoseShapeParams.from_dict(params.to_dict())
        assert np.array_equal(again.joint_rotations, params.joint_rotations)
        assert again.global_scale == params.global_scale
