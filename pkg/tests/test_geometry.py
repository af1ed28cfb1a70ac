import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nfreg.exceptions import InvalidInputError
from nfreg.geometry import (
    KDTREE_MIN_POINTS,
    RigidTransform,
    build_knn_graph,
    chamfer_distance,
    denormalize_cloud,
    graph_geodesics,
    graph_laplacian,
    is_connected,
    nearest_indices,
    nearest_neighbor,
    normalize_cloud,
    read_xyz,
    trilinear_sample,
    voxel_distance_pyramid,
    write_xyz,
)

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def path_graph(n=3, weighting="uniform"):
    return build_knn_graph(np.array([[float(i), 0.0, 0.0] for i in range(n)]), k=1, weighting=weighting)


class TestNearestNeighbor:
    def test_single_point(self):
        assert nearest_neighbor([0, 0, 0], [[0, 0, 0]]) == (0, 0.0)

    def test_smaller_norm_wins(self):
        assert nearest_neighbor([0, 0, 0], [[1, 0, 0], [0, 2, 0]]) == (0, 1.0)

    def test_ties_go_to_lowest_index(self):
        idx, dist = nearest_neighbor([0, 0, 0], [[0, 1, 0], [1, 0, 0], [0, 0, 1]])
        assert idx == 0 and dist == 1.0

    def test_empty_cloud_rejected(self):
        with pytest.raises(InvalidInputError):
            nearest_neighbor([0, 0, 0], np.zeros((0, 3)))

    @given(seed=seeds)
    def test_matches_exhaustive_scan(self, seed):
        rng = np.random.default_rng(seed)
        cloud = rng.normal(size=(512, 3))
        queries = rng.normal(size=(64, 3))
        idx, dist = nearest_indices(queries, cloud)
        full = np.linalg.norm(queries[:, None, :] - cloud[None, :, :], axis=2)
        assert np.array_equal(idx, np.argmin(full, axis=1))
        assert np.allclose(dist, full.min(axis=1), atol=1e-12)

    def test_kdtree_path_matches_brute_force(self):
        rng = np.random.default_rng(3)
        cloud = rng.normal(size=(KDTREE_MIN_POINTS + 10, 3))
        queries = rng.normal(size=(20, 3))
        idx, _ = nearest_indices(queries, cloud)
        brute = np.argmin(np.linalg.norm(queries[:, None] - cloud[None], axis=2), axis=1)
        assert np.array_equal(idx, brute)

    def test_kdtree_many_way_ties_go_to_lowest_index(self):
        axis = np.arange(17.0)
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
        cloud = grid[np.random.default_rng(5).permutation(len(grid))]
        assert len(cloud) > KDTREE_MIN_POINTS
        # cell centers sit at the same distance from all eight corners
        queries = np.array([[0.5, 0.5, 0.5], [3.5, 7.5, 11.5], [15.5, 0.5, 8.5], [9.5, 9.5, 9.5]])
        idx, dist = nearest_indices(queries, cloud)
        sq = np.einsum("qnk,qnk->qn", queries[:, None] - cloud[None], queries[:, None] - cloud[None])
        assert np.array_equal(idx, np.argmin(sq, axis=1))
        assert np.allclose(dist, np.sqrt(0.75))


class TestChamfer:
    def test_self_distance_is_zero(self):
        a = np.random.default_rng(0).normal(size=(30, 3))
        assert chamfer_distance(a, a) == 0.0

    def test_single_pair(self):
        assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]], mode="a_to_b") == 1.0

    @given(seed=seeds)
    def test_matches_all_pairs_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(100, 3)), rng.normal(size=(100, 3))
        sq = np.sum((a[:, None] - b[None]) ** 2, axis=2)
        expected = sq.min(axis=1).mean() + sq.min(axis=0).mean()
        assert abs(chamfer_distance(a, b) - expected) < 1e-12
        assert abs(chamfer_distance(a, b) - chamfer_distance(b, a)) < 1e-12

    def test_one_sided_is_asymmetric(self):
        a = np.array([[0.0, 0, 0]])
        b = np.array([[1.0, 0, 0], [5.0, 0, 0]])
        assert chamfer_distance(a, b, "a_to_b") == 1.0
        assert chamfer_distance(b, a, "a_to_b") == 13.0

    def test_unknown_mode(self):
        with pytest.raises(InvalidInputError):
            chamfer_distance([[0, 0, 0]], [[1, 0, 0]], mode="sideways")


class TestKnnGraph:
    def test_collinear_edges(self):
        g = path_graph(3)
        undirected = {tuple(sorted(e)) for e in g.edges.tolist()}
        assert undirected == {(0, 1), (1, 2)}
        assert len(g.edges) == 4

    def test_uniform_weights(self):
        g = path_graph(5)
        assert np.all(g.weights == 1.0)

    def test_gaussian_large_sigma_tends_to_one(self):
        cloud = np.random.default_rng(1).normal(size=(20, 3))
        g = build_knn_graph(cloud, k=4, weighting="gaussian", sigma=1e8)
        assert np.allclose(g.weights, 1.0, atol=1e-9)

    def test_symmetric_with_equal_weights(self):
        cloud = np.random.default_rng(2).normal(size=(40, 3))
        w = build_knn_graph(cloud, k=5).weight_matrix().toarray()
        assert np.array_equal(w, w.T)
        assert np.all(np.diag(w) == 0)

    def test_k_must_be_below_n(self):
        with pytest.raises(InvalidInputError):
            build_knn_graph(np.zeros((3, 3)) + np.arange(3)[:, None], k=3)


class TestLaplacian:
    def test_path_graph(self):
        expected = np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]], dtype=float)
        assert np.array_equal(graph_laplacian(path_graph(3)), expected)

    @given(seed=seeds)
    def test_laplacian_properties(self, seed):
        rng = np.random.default_rng(seed)
        lap = graph_laplacian(build_knn_graph(rng.normal(size=(30, 3)), k=4))
        assert np.allclose(lap @ np.ones(30), 0.0, atol=1e-12)
        assert np.array_equal(lap, lap.T)
        x = rng.normal(size=(100, 30))
        assert np.all(np.einsum("ij,jk,ik->i", x, lap, x) >= -1e-12)


class TestGeodesics:
    def test_source_distance_is_zero(self):
        assert graph_geodesics(path_graph(4), 2)[2] == 0.0

    def test_path_distance(self):
        assert graph_geodesics(path_graph(3), 0)[2] == 2.0

    def test_triangle_inequality(self):
        cloud = np.random.default_rng(5).normal(size=(50, 3))
        g = build_knn_graph(cloud, k=6)
        d = graph_geodesics(g, 0)
        assert np.all(d[g.edges[:, 1]] <= d[g.edges[:, 0]] + g.lengths + 1e-12)

    def test_source_out_of_range(self):
        with pytest.raises(InvalidInputError):
            graph_geodesics(path_graph(3), 3)

    def test_disconnected_is_infinite(self):
        cloud = np.array([[0, 0, 0], [1, 0, 0], [100, 0, 0], [101, 0, 0]], dtype=float)
        g = build_knn_graph(cloud, k=1)
        assert not is_connected(g)
        assert np.isinf(graph_geodesics(g, 0)[3])


class TestPyramid:
    def test_distance_zero_at_occupied_center(self):
        pyr = voxel_distance_pyramid(np.zeros((1, 3)) + 0.75 / 8 * np.array([1.0, 1.0, 1.0]), 8, 1)
        grid = pyr.levels[0]
        assert grid.channels[4, 4, 4, 0] == pytest.approx(0.0, abs=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.4, 0.4, size=(5, 3))
        grid = voxel_distance_pyramid(pts, base_resolution=8, levels=1).levels[0]
        centers = grid.cell_centers().reshape(-1, 3)
        brute = np.linalg.norm(centers[:, None] - pts[None], axis=2).min(axis=1)
        assert np.allclose(grid.channels[..., 0].ravel(), brute, atol=1e-12)
        assert np.all(grid.channels[..., 0] >= 0)

    def test_levels_halve(self):
        pyr = voxel_distance_pyramid(np.random.default_rng(0).normal(size=(20, 3)) * 0.1, 32, 4)
        assert [g.resolution for g in pyr.levels] == [32, 16, 8, 4]
        assert pyr.n_features == 16

    def test_base_resolution_too_small(self):
        with pytest.raises(InvalidInputError):
            voxel_distance_pyramid(np.zeros((1, 3)), base_resolution=2, levels=1)


class TestTrilinear:
    @pytest.fixture
    def pyramid(self):
        pts = np.random.default_rng(11).uniform(-0.3, 0.3, size=(15, 3))
        return voxel_distance_pyramid(pts, base_resolution=8, levels=2)

    def test_at_cell_center(self, pyramid):
        grid = pyramid.levels[0]
        c = grid.cell_centers()[2, 3, 5]
        assert np.allclose(trilinear_sample(pyramid, c)[:4], grid.channels[2, 3, 5], atol=1e-12)
        assert trilinear_sample(pyramid, c).shape == (8,)

    def test_midpoint_is_mean(self, pyramid):
        grid = pyramid.levels[0]
        centers = grid.cell_centers()
        mid = 0.5 * (centers[2, 3, 5] + centers[3, 3, 5])
        expected = 0.5 * (grid.channels[2, 3, 5] + grid.channels[3, 3, 5])
        assert np.allclose(trilinear_sample(pyramid, mid)[:4], expected, atol=1e-12)

    def test_far_outside_clamps(self, pyramid):
        grid = pyramid.levels[0]
        far = np.array([10.0, -10.0, 10.0])
        assert np.allclose(trilinear_sample(pyramid, far)[:4], grid.channels[7, 0, 7], atol=1e-12)

    def test_continuity(self, pyramid):
        rng = np.random.default_rng(0)
        p = rng.uniform(-0.5, 0.5, size=(50, 3))
        a = trilinear_sample(pyramid, p)
        b = trilinear_sample(pyramid, p + 1e-6)
        span = np.ptp(np.concatenate([g.channels.reshape(-1, 4) for g in pyramid.levels]), axis=0)
        assert np.all(np.abs(a - b) < 1e-3 * np.tile(span, 2) + 1e-12)


class TestNormalization:
    def test_normalized_frame(self):
        cloud = np.random.default_rng(0).normal(size=(100, 3)) * 4 + 7
        out, rec = normalize_cloud(cloud)
        assert np.linalg.norm(out.mean(axis=0)) < 1e-9
        assert abs(np.linalg.norm(out.max(axis=0) - out.min(axis=0)) - 1.0) < 1e-9
        assert np.allclose(denormalize_cloud(out, rec), cloud, atol=1e-9)

    def test_already_normalized_is_identity(self):
        out, _ = normalize_cloud(np.random.default_rng(1).normal(size=(50, 3)))
        _, rec = normalize_cloud(out)
        assert abs(rec.scale - 1.0) < 1e-9
        assert np.linalg.norm(rec.centroid) < 1e-9

    def test_scale_invariance(self):
        cloud = np.random.default_rng(2).normal(size=(50, 3))
        assert np.allclose(normalize_cloud(cloud)[0], normalize_cloud(10 * cloud)[0], atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(InvalidInputError):
            normalize_cloud(np.ones((5, 3)))


class TestRigidTransform:
    def test_reflection_rejected(self):
        with pytest.raises(InvalidInputError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_inverse_composes_to_identity(self):
        c, s = np.cos(0.3), np.sin(0.3)
        t = RigidTransform(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]]), np.array([1.0, 2, 3]))
        ident = t.compose(t.inverse())
        assert np.allclose(ident.rotation, np.eye(3)) and np.allclose(ident.translation, 0)


class TestXyz:
    def test_write_then_read(self, tmp_path):
        pts = np.array([[0.5, -1.25, 3.0], [1e-3, 2.0, -0.125]])
        path = str(tmp_path / "c.xyz")
        write_xyz(path, pts)
        assert np.array_equal(read_xyz(path), pts)
        with open(path, "rb") as f:
            assert b"\r" not in f.read()

    def test_comments_skipped(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("# header\n1 2 3\n\n4 5 6\n")
        assert read_xyz(str(path)).shape == (2, 3)

    def test_malformed_line_named(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("1 2 3\n4 5\n")
        with pytest.raises(InvalidInputError, match=":2:"):
            read_xyz(str(path))

    def test_non_utf8_rejected(self, tmp_path):
        path = tmp_path / "latin.xyz"
        path.write_bytes(b"# caf\xe9\n1 2 3\n")
        with pytest.raises(InvalidInputError, match="UTF-8"):
            read_xyz(str(path))

    def test_sample_target(self, data_path):
        assert read_xyz(os.path.join(data_path, "cube.xyz")).shape[1] == 3
