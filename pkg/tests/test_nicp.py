import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nfreg.exceptions import InvalidInputError, NumericalDegeneracyError, StateError
from nfreg.field import NeuralDeformationField
from nfreg.geometry import nearest_indices
from nfreg.nicp import (
    Correspondence,
    NicpConfig,
    best_fit_transform,
    nicp_objective,
    nicp_pair,
    nicp_refine,
    nicp_step,
    rigid_icp,
    write_nicp_trace,
)
from nfreg.segmentation import segment_template
from nfreg.synthetic import GeneratorConfig, sample_training_shape
from tests.gradcheck import assert_matches_fd


@pytest.fixture
def pair(template):
    return sample_training_shape(template, 3, GeneratorConfig(m=60, n_points=200, pose_fraction=0.3))


@pytest.fixture
def grid():
    axis = np.linspace(-0.5, 0.5, 6)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)


class TestSelection:
    def test_oracle_selects_nearest_vertex(self, template, pair, oracle_factory):
        field = oracle_factory(template, pair.gt_vertices).bind_target(pair.target)
        corr = nicp_pair(field, pair.target[:50])
        idx, dist = nearest_indices(pair.target[:50], pair.gt_vertices)
        assert np.array_equal(corr.indices, idx)
        assert np.allclose(corr.norms, dist)

    def test_unbound(self, tiny_field):
        with pytest.raises(StateError):
            nicp_pair(tiny_field, np.zeros((2, 3)))

    def test_correspondence_lengths(self):
        with pytest.raises(InvalidInputError):
            Correspondence([0, 1], [0.1])


class TestNicpSteps:
    def test_step_loss_is_selected_offsets(self, tiny_field, pair):
        field = tiny_field.bind_target(pair.target)
        samples = pair.target[:20]
        corr = nicp_pair(field, samples)
        offsets = field.raw_offsets(samples)[np.arange(20), corr.indices]
        before = field.params.copy()
        loss, field, state = nicp_step(field, samples, corr, lr=0.0)
        assert abs(loss - np.sum(offsets**2)) < 1e-10
        assert state.step == 1
        assert all(np.array_equal(before[k], field.params[k]) for k in before)

    def test_frozen_selection_trace(self, tiny_field, pair):
        field = tiny_field.bind_target(pair.target)
        cfg = NicpConfig(steps=3, lr=0.0, max_samples=32, reselect=False)
        _, trace = nicp_refine(field, config=cfg, seed=0)
        assert [row["step"] for row in trace] == [1, 2, 3]
        assert trace[0]["sum_loss"] == trace[2]["sum_loss"]
        assert abs(trace[0]["mean_loss"] * 32 - trace[0]["sum_loss"]) < 1e-12

    def test_loss_decreases(self, tiny_field, pair):
        field = tiny_field.bind_target(pair.target)
        cfg = NicpConfig(steps=10, lr=1e-2, max_samples=64, reselect=False)
        _, trace = nicp_refine(field, config=cfg, seed=1)
        assert trace[-1]["mean_loss"] < trace[0]["mean_loss"]

    def test_sample_budget_capped_by_target(self, tiny_field, pair):
        field = tiny_field.bind_target(pair.target)
        _, trace = nicp_refine(field, config=NicpConfig(steps=1, lr=0.0, max_samples=5000), seed=0)
        assert abs(trace[0]["sum_loss"] / 200 - trace[0]["mean_loss"]) < 1e-12

    def test_config_rejects_zero_steps(self):
        with pytest.raises(InvalidInputError):
            NicpConfig(steps=0)

    def test_trace_file(self, tmp_path):
        path = write_nicp_trace(str(tmp_path / "nicp.csv"), [{"step": 1, "sum_loss": 2.0, "mean_loss": 0.5}])
        with open(path) as f:
            assert f.read().splitlines() == ["step,sum_loss,mean_loss", "1,2.0,0.5"]

    def test_objective_gradient_matches_finite_differences(self, template, pair):
        seg = segment_template(template, 3, seed=0)
        field = NeuralDeformationField(template, seg, hidden=(4,), base_resolution=8, levels=2, seed=1)
        field.bind_target(pair.target)
        samples = pair.target[:6]
        corr = nicp_pair(field, samples)
        for reduction in ("mean", "sum"):
            assert_matches_fd(nicp_objective(field, samples, corr, reduction=reduction), field.params)

    def test_step_by_hand_on_a_linear_head(self, template, pair):
        field = NeuralDeformationField(template, hidden=(), base_resolution=8, levels=2, seed=3)
        field.bind_target(pair.target)
        samples = pair.target[:5]
        corr = Correspondence([4, 4, 17, 30, 59], np.zeros(5))
        feats = field.features(samples)
        w, b = field.params["h0.w0"].copy(), field.params["h0.b0"].copy()
        cols = 3 * corr.indices[:, None] + np.arange(3)
        selected = np.take_along_axis(feats @ w + b, cols, axis=1)
        # d/dp of (1/K) sum_k ||o_k||^2 with o_k = feats_k @ w[:, cols_k] + b[cols_k]
        grad_w, grad_b = np.zeros_like(w), np.zeros_like(b)
        for k in range(5):
            grad_w[:, cols[k]] += 2.0 / 5 * np.outer(feats[k], selected[k])
            grad_b[cols[k]] += 2.0 / 5 * selected[k]
        lr, eps = 1e-3, 1e-8
        loss, field, state = nicp_step(field, samples, corr, lr=lr)
        assert abs(loss - np.sum(selected**2)) < 1e-12
        # first Adam step: the bias-corrected moments are g and g^2
        assert np.allclose(field.params["h0.w0"], w - lr * grad_w / (np.abs(grad_w) + eps), atol=1e-12)
        assert np.allclose(field.params["h0.b0"], b - lr * grad_b / (np.abs(grad_b) + eps), atol=1e-12)

    def test_tiny_steps_never_raise_the_loss(self, tiny_field, pair):
        field = tiny_field.bind_target(pair.target)
        cfg = NicpConfig(steps=6, lr=1e-8, max_samples=64, reselect=False)
        _, trace = nicp_refine(field, config=cfg, seed=0)
        losses = [row["sum_loss"] for row in trace]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_same_seed_same_trace(self, tiny_field, pair):
        cfg = NicpConfig(steps=4, lr=1e-3, max_samples=32)
        runs = [nicp_refine(tiny_field.clone().bind_target(pair.target), config=cfg, seed=7) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        assert all(np.array_equal(runs[0][0].params[k], runs[1][0].params[k]) for k in tiny_field.params)

    def test_original_field_and_pyramid_untouched(self, tiny_field, pair):
        bound = tiny_field.bind_target(pair.target)
        params = bound.params.copy()
        channels = [level.channels.copy() for level in bound.pyramid.levels]
        work, _ = nicp_refine(bound.clone(), config=NicpConfig(steps=3, lr=1e-2, max_samples=32), seed=0)
        assert work.pyramid is bound.pyramid
        assert any(not np.array_equal(work.params[k], params[k]) for k in params)
        assert all(np.array_equal(bound.params[k], params[k]) for k in params)
        assert all(np.array_equal(level.channels, c) for level, c in zip(bound.pyramid.levels, channels))


class TestRigid:
    def test_best_fit_recovers_motion(self, grid):
        r = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
        t = np.array([0.1, 0.0, -0.4])
        transform, scale = best_fit_transform(grid, grid @ r.T + t)
        assert scale == 1.0
        assert np.allclose(transform.rotation, r, atol=1e-10)
        assert np.allclose(transform.translation, t, atol=1e-10)

    def test_best_fit_scale(self, grid):
        r = Rotation.from_rotvec([0.0, 1.0, 0.0]).as_matrix()
        _, scale = best_fit_transform(grid, 1.7 * grid @ r.T, with_scale=True)
        assert abs(scale - 1.7) < 1e-10

    def test_no_reflection(self, grid):
        mirrored = grid * np.array([-1.0, 1.0, 1.0])
        transform, _ = best_fit_transform(grid, mirrored)
        assert np.linalg.det(transform.rotation) > 0

    def test_collinear_is_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(NumericalDegeneracyError):
            best_fit_transform(line, line + 1.0)

    def test_icp_recovers_small_motion(self, grid):
        r = Rotation.from_rotvec([0.0, 0.0, 0.03]).as_matrix()
        t = np.array([0.01, -0.005, 0.0])
        target = grid @ r.T + t
        transform, history = rigid_icp(grid, target)
        assert history[-1] < 1e-9
        assert np.allclose(transform.apply(grid), target, atol=1e-9)
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))

    def test_icp_recovers_ten_degrees(self):
        rng = np.random.default_rng(1)
        cloud = rng.normal(size=(400, 3)) * np.array([1.0, 0.6, 0.3])
        r = Rotation.from_rotvec(np.deg2rad(10.0) * np.array([0.0, 0.0, 1.0])).as_matrix()
        t = np.array([0.1, 0.0, 0.0])
        transform, history = rigid_icp(cloud, cloud @ r.T + t, max_iters=100)
        assert history[-1] < 1e-6
        assert np.allclose(transform.rotation, r, atol=1e-6)
        assert np.allclose(transform.translation, t, atol=1e-6)

    def test_icp_is_local(self):
        # a skewed, elongated cloud turned by 160 degrees: the nearest
        # alignment from the identity is the mirrored one
        rng = np.random.default_rng(2)
        cloud = np.column_stack([rng.exponential(1.0, 400), rng.normal(0.0, 0.15, (400, 2))])
        cloud -= cloud.mean(axis=0)
        r = Rotation.from_rotvec(np.deg2rad(160.0) * np.array([0.0, 0.0, 1.0]))
        transform, history = rigid_icp(cloud, r.apply(cloud), max_iters=100)
        assert history[-1] > 0.05
        miss = r * Rotation.from_matrix(transform.rotation).inv()
        assert np.rad2deg(miss.magnitude()) > 90.0


@pytest.mark.slow
def test_icp_recovers_random_motions():
    rng = np.random.default_rng(0)
    cloud = rng.normal(size=(500, 3)) * np.array([1.0, 0.6, 0.3])
    for _ in range(100):
        axis = rng.normal(size=3)
        angle = rng.uniform(0.0, np.deg2rad(30.0))
        r = Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()
        t = rng.uniform(-1.0, 1.0, size=3)
        t *= rng.uniform(0.0, 0.2) / np.linalg.norm(t)
        _, history = rigid_icp(cloud, cloud @ r.T + t, max_iters=50)
        assert history[-1] < 1e-6
