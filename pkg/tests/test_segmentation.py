import itertools

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nfreg.exceptions import InvalidInputError
from nfreg.geometry import KnnGraph, build_knn_graph, graph_laplacian
from nfreg.segmentation import (
    Segmentation,
    kmeans,
    read_labels,
    segment_graph,
    segment_template,
    smallest_eigenpairs,
    write_labels,
)


def graph_from_pairs(n, pairs):
    pairs = np.array(pairs, dtype=np.int64)
    edges = np.concatenate([pairs, pairs[:, ::-1]])
    return KnnGraph(n_nodes=n, edges=edges, weights=np.ones(len(edges)), lengths=np.ones(len(edges)))


def clique_chain(n_cliques, size):
    """Complete graphs joined in a path by one edge between neighbors."""
    pairs = []
    for c in range(n_cliques):
        pairs += [(c * size + a, c * size + b) for a, b in itertools.combinations(range(size), 2)]
        if c:
            pairs.append((c * size - 1, c * size))
    return graph_from_pairs(n_cliques * size, pairs)


class TestSegmentation:
    def test_empty_segment_rejected(self):
        with pytest.raises(InvalidInputError):
            Segmentation([0, 0, 2], 3)

    def test_sizes_and_members(self):
        seg = Segmentation([1, 0, 1, 1], 2)
        assert seg.sizes().tolist() == [1, 3]
        assert seg.members(1).tolist() == [0, 2, 3]

    def test_labels_csv_round_trip(self, tmp_path):
        seg = Segmentation([0, 1, 1, 2, 0], 3)
        path = write_labels(str(tmp_path / "labels.csv"), seg)
        with open(path) as f:
            assert f.readline() == "vertex,label\n"
        again = read_labels(path)
        assert np.array_equal(again.labels, seg.labels) and again.n_segments == 3


class TestEigenpairs:
    def test_path_graph_spectrum(self):
        n = 6
        lap = graph_laplacian(graph_from_pairs(n, [(i, i + 1) for i in range(n - 1)]))
        values, vectors = smallest_eigenpairs(lap, 2)
        expected = 2 - 2 * np.cos(np.pi * np.arange(1, 3) / n)
        assert np.allclose(values, expected, atol=1e-10)
        assert np.allclose(vectors.T @ vectors, np.eye(2), atol=1e-10)
        assert np.allclose(lap @ vectors, vectors * values, atol=1e-10)

    def test_sign_convention(self):
        lap = graph_laplacian(clique_chain(2, 4))
        _, vectors = smallest_eigenpairs(lap, 3)
        pivots = np.argmax(np.abs(vectors), axis=0)
        assert np.all(vectors[pivots, np.arange(3)] > 0)

    def test_kernel_kept_when_asked(self):
        lap = graph_laplacian(clique_chain(2, 3))
        values, vectors = smallest_eigenpairs(lap, 1, skip_zero=False)
        assert abs(values[0]) < 1e-10
        assert np.allclose(np.abs(vectors[:, 0]), 1 / np.sqrt(6))

    def test_non_symmetric_rejected(self):
        with pytest.raises(InvalidInputError):
            smallest_eigenpairs(np.array([[1.0, 2.0], [0.0, 1.0]]), 1)

    def test_too_many_requested(self):
        with pytest.raises(InvalidInputError):
            smallest_eigenpairs(np.eye(3), 4)


class TestKmeans:
    def test_separated_blobs(self):
        rng = np.random.default_rng(0)
        centers = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        truth = np.repeat(np.arange(3), 20)
        rows = centers[truth] + rng.normal(size=(60, 2))
        labels = kmeans(rows, 3, seed=1)
        for c in range(3):
            assert len(set(labels[truth == c])) == 1
        assert len(set(labels)) == 3

    def test_duplicate_rows_leave_no_cluster_empty(self):
        rows = np.zeros((6, 2))
        rows[5] = 1.0
        labels = kmeans(rows, 4, seed=0)
        assert np.all(np.bincount(labels, minlength=4) > 0)

    def test_k_out_of_range(self):
        with pytest.raises(InvalidInputError):
            kmeans(np.zeros((3, 2)), 4)

    def test_restarts_keep_the_lowest_inertia(self):
        rng = np.random.default_rng(2)
        rows = np.concatenate([rng.normal(size=(15, 2)) + c for c in ([0, 0], [6, 0], [0, 6], [6, 6])])

        def inertia(labels):
            return sum(((rows[labels == j] - rows[labels == j].mean(axis=0)) ** 2).sum() for j in range(4))

        # the first of ten restarts replays the single run
        assert inertia(kmeans(rows, 4, seed=0, n_init=10)) <= inertia(kmeans(rows, 4, seed=0, n_init=1)) + 1e-9

    def test_restarts_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            kmeans(np.zeros((3, 2)), 2, n_init=0)


class TestSegmentGraph:
    def test_single_segment(self):
        seg = segment_graph(clique_chain(2, 4), 1)
        assert seg.n_segments == 1 and not seg.labels.any()

    def test_cliques_are_not_split(self):
        graph = clique_chain(3, 8)
        seg = segment_graph(graph, 2, seed=0)
        per_clique = seg.labels.reshape(3, 8)
        assert np.all(per_clique == per_clique[:, :1])
        assert set(seg.labels.tolist()) == {0, 1}

    def test_first_appearance_numbering(self):
        seg = segment_graph(clique_chain(3, 8), 2, seed=3)
        assert seg.labels[0] == 0
        _, first = np.unique(seg.labels, return_index=True)
        assert np.all(np.diff(first) > 0)

    def test_deterministic(self):
        graph = clique_chain(3, 5)
        a = segment_graph(graph, 3, seed=2)
        b = segment_graph(graph, 3, seed=2)
        assert np.array_equal(a.labels, b.labels)

    def test_disconnected_rejected(self):
        graph = graph_from_pairs(4, [(0, 1), (2, 3)])
        with pytest.raises(InvalidInputError):
            segment_graph(graph, 2)

    def test_segment_template_sets_labels(self, template):
        seg = segment_template(template, 4, seed=0)
        assert np.array_equal(template.labels, seg.labels)
        assert seg.n_segments == 4 and seg.sizes().min() >= 1

    def test_dumbbell_splits_at_the_bridge(self):
        graph = clique_chain(2, 10)
        for seed in (0, 1):
            seg = segment_graph(graph, 2, seed=seed)
            assert seg.labels.tolist() == [0] * 10 + [1] * 10

    def test_rigid_motion_does_not_change_labels(self, template):
        rot = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
        moved = template.rest_vertices @ rot.T + np.array([4.0, -2.0, 0.5])
        a = segment_graph(build_knn_graph(template.rest_vertices, k=8), 4, seed=0)
        b = segment_graph(build_knn_graph(moved, k=8), 4, seed=0)
        assert np.array_equal(a.labels, b.labels)
