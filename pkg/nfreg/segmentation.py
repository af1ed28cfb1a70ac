"""
Spectral partition of the template: Laplacian eigenvectors clustered with
k-means give the vertex sets owned by the field's heads.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import InvalidInputError
from .geometry import graph_laplacian, is_connected

_LOGGER = logging.getLogger(__name__)

DEFAULT_SEGMENTS = 16
KMEANS_MAX_ITERS = 100
KMEANS_RESTARTS = 10
KERNEL_TOL = 1e-8
SYMMETRY_TOL = 1e-9

__all__ = [
    "Segmentation",
    "smallest_eigenpairs",
    "kmeans",
    "segment_graph",
    "segment_template",
    "write_labels",
    "read_labels",
]


@dataclass
class Segmentation:
    """Per-vertex segment labels in [0, n_segments), every segment non-empty."""

    labels: np.ndarray
    n_segments: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.n_segments = int(self.n_segments)
        if self.n_segments < 1:
            raise InvalidInputError("A segmentation needs at least one segment")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_segments):
            raise InvalidInputError(f"Labels must lie in [0, {self.n_segments})")
        sizes = self.sizes()
        if np.any(sizes == 0):
            raise InvalidInputError(f"Segments {np.flatnonzero(sizes == 0).tolist()} are empty")

    @classmethod
    def single(cls, n_vertices):
        return cls(np.zeros(n_vertices, dtype=np.int64), 1)

    def sizes(self):
        return np.bincount(self.labels, minlength=self.n_segments)

    def members(self, segment):
        return np.flatnonzero(self.labels == segment)


def smallest_eigenpairs(matrix, count, skip_zero=True):
    """
    Smallest eigenpairs of a symmetric PSD matrix.

    Eigenvector signs are fixed so that each vector's largest-magnitude entry
    (lowest index on ties) is positive.

    :param array-like matrix: symmetric matrix
    :param int count: number of eigenpairs
    :param bool skip_zero: discard the kernel (eigenvalues below 1e-8) first
    :return (numpy.ndarray, numpy.ndarray): ascending eigenvalues (count,) and
        orthonormal eigenvectors as columns (n, count)
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"Expected a square matrix, got shape {a.shape}")
    if np.abs(a - a.T).max() > SYMMETRY_TOL:
        raise InvalidInputError("Matrix is not symmetric")
    n = a.shape[0]
    if not 1 <= count <= n:
        raise InvalidInputError(f"Cannot take {count} eigenpairs of a {n}x{n} matrix")
    values, vectors = scipy.linalg.eigh(0.5 * (a + a.T))
    if skip_zero:
        keep = values >= KERNEL_TOL
        values, vectors = values[keep], vectors[:, keep]
    if len(values) < count:
        raise InvalidInputError(f"Only {len(values)} non-kernel eigenpairs, {count} requested")
    values, vectors = values[:count], vectors[:, :count]
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(count)])
    return values, vectors * np.where(signs == 0, 1.0, signs)


def _sq_distances(x, c):
    d = np.sum(x * x, axis=1, keepdims=True) - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # all remaining rows duplicate a centroid
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_distances(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _repair_empty(x, labels, centroids):
    k = len(centroids)
    for j in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[j] > 0:
            continue
        dist = np.sum((x - centroids[labels]) ** 2, axis=1)
        dist[counts[labels] <= 1] = -1.0
        victim = int(np.argmax(dist))
        labels[victim] = j
        centroids[j] = x[victim]
    return labels


def _lloyd(x, centroids, max_iters):
    labels = None
    for it in range(max_iters):
        new = np.argmin(_sq_distances(x, centroids), axis=1)
        new = _repair_empty(x, new, centroids)
        if labels is not None and np.array_equal(new, labels):
            _LOGGER.debug(f"k-means converged after {it} iterations")
            break
        labels = new
        for j in range(len(centroids)):
            centroids[j] = x[labels == j].mean(axis=0)
    inertia = float(np.sum((x - centroids[labels]) ** 2))
    return labels, inertia


def kmeans(rows, k, seed=0, max_iters=KMEANS_MAX_ITERS, n_init=KMEANS_RESTARTS):
    """
    Lloyd's algorithm with k-means++ seeding, restarted ``n_init`` times from
    one seeded generator; the run with the lowest inertia wins (the earliest
    on ties).

    :param array-like rows: (n, d) feature rows
    :param int k: number of clusters, at most n
    :param int seed: seeding randomness
    :param int max_iters: iteration cap per run
    :param int n_init: number of seeded runs
    :return numpy.ndarray: (n,) labels in [0, k), every cluster non-empty;
        equidistant rows go to the lowest centroid index
    """
    x = np.asarray(rows, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if not 1 <= k <= n:
        raise InvalidInputError(f"k must lie in [1, {n}], got {k}")
    if n_init < 1 or max_iters < 1:
        raise InvalidInputError(f"n_init and max_iters must be positive, got {n_init} and {max_iters}")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        labels, inertia = _lloyd(x, _kmeans_pp(x, k, rng), max_iters)
        if inertia < best_inertia:
            best, best_inertia = labels, inertia
    return best


def _first_appearance_order(labels, k):
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first, kind="stable")
    relabel = np.empty(k, dtype=np.int64)
    relabel[np.unique(labels)[order]] = np.arange(k)
    return relabel[labels]


def segment_graph(graph, l, seed=0):
    """
    Spectral clustering of a kNN graph into ``l`` parts, labels numbered by
    first appearance in vertex order.

    :param KnnGraph graph: connected graph
    :param int l: number of segments
    :param int seed: k-means seed
    :return Segmentation: the partition
    """
    if l < 1 or l > graph.n_nodes:
        raise InvalidInputError(f"Segment count must lie in [1, {graph.n_nodes}], got {l}")
    if not is_connected(graph):
        raise InvalidInputError("Graph is disconnected; rebuild it with a larger k")
    if l == 1:
        return Segmentation.single(graph.n_nodes)
    _, vectors = smallest_eigenpairs(graph_laplacian(graph), l, skip_zero=True)
    labels = kmeans(vectors, l, seed=seed)
    return Segmentation(_first_appearance_order(labels, l), l)


def segment_template(template, l=DEFAULT_SEGMENTS, seed=0):
    """
    Partition the template for the field's heads and store the labels on it.

    :param TemplateModel template: template with a connected rest graph
    :param int l: number of segments
    :param int seed: k-means seed
    :return Segmentation: the partition
    """
    seg = segment_graph(template.graph, l, seed=seed)
    template.labels = seg.labels
    sizes = seg.sizes()
    if sizes.min() < 3:
        _LOGGER.warning(f"Smallest of {l} segments holds {sizes.min()} vertices")
    _LOGGER.info(f"Segmented template into {l} parts (sizes {sizes.min()}..{sizes.max()})")
    return seg


def write_labels(path, segmentation):
    """Write labels.csv: a header, then one ``vertex,label`` row per vertex."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["vertex", "label"])
        for v, lab in enumerate(segmentation.labels):
            writer.writerow([v, int(lab)])
    return path


def read_labels(path):
    with open(path, "r", newline="") as f:
        reader = csv.DictReader(f)
        rows = sorted((int(r["vertex"]), int(r["label"])) for r in reader)
    if [v for v, _ in rows] != list(range(len(rows))):
        raise InvalidInputError(f"{path}: vertex column must enumerate 0..m-1")
    labels = np.array([lab for _, lab in rows], dtype=np.int64)
    return Segmentation(labels, int(labels.max()) + 1 if len(labels) else 1)
