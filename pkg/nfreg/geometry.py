"""
Point-cloud and graph primitives: nearest neighbors, Chamfer distance,
kNN-graph Laplacian, graph geodesics, voxel distance pyramids, normalization
and ASCII XYZ input/output.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .exceptions import InvalidInputError

_LOGGER = logging.getLogger(__name__)

# above this many cloud points, lookups go through a kd-tree
KDTREE_MIN_POINTS = 4096
# brute force is also abandoned when the query x cloud product gets large
BRUTE_FORCE_MAX_PAIRS = 1 << 22
# extra neighbors fetched from the kd-tree so exact ties can resolve to the lowest index
_TIE_CANDIDATES = 4
_TIE_RTOL = 1e-12
_TIE_ATOL = 1e-300

CHAMFER_MODES = ("bidirectional", "a_to_b")
KNN_WEIGHTINGS = ("uniform", "gaussian")

DEFAULT_KNN_K = 8
DEFAULT_BASE_RESOLUTION = 32
DEFAULT_LEVELS = 4
# the pyramid covers the cube [-h, h]^3 around the normalized cloud's centroid
DEFAULT_HALF_EXTENT = 0.75
CHANNELS_PER_LEVEL = 4

ORTHONORMAL_TOL = 1e-9

__all__ = [
    "RigidTransform",
    "NormalizationRecord",
    "KnnGraph",
    "DistanceGrid",
    "DistanceGridPyramid",
    "as_cloud",
    "nearest_neighbor",
    "nearest_indices",
    "chamfer_distance",
    "build_knn_graph",
    "graph_laplacian",
    "graph_geodesics",
    "graph_distance_matrix",
    "is_connected",
    "voxel_distance_pyramid",
    "trilinear_sample",
    "normalize_cloud",
    "apply_normalization",
    "denormalize_cloud",
    "read_xyz",
    "write_xyz",
]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError(
                f"Rigid transform needs a 3x3 rotation and a 3-vector, "
                f"got {r.shape} and {t.shape}"
            )
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise InvalidInputError("Rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise InvalidInputError("Rotation has determinant -1 (reflection)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other):
        """Return the transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass(frozen=True)
class NormalizationRecord:
    """
    Parameters of the canonical frame: normalized = (x - centroid) / scale.
    """

    centroid: np.ndarray
    scale: float

    def to_dict(self):
        return {"centroid": [float(c) for c in self.centroid], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centroid"], dtype=float), float(d["scale"]))


@dataclass
class KnnGraph:
    """
    Symmetric weighted graph over cloud points.

    ``edges`` holds both directions of every undirected edge; ``weights`` are
    the Laplacian weights and ``lengths`` the Euclidean edge lengths used
    for geodesics.
    """

    n_nodes: int
    edges: np.ndarray
    weights: np.ndarray
    lengths: np.ndarray
    degree: np.ndarray = field(default=None)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float)
        self.lengths = np.asarray(self.lengths, dtype=float)
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise InvalidInputError("Graph contains self-loops")
        if np.any(self.weights <= 0):
            raise InvalidInputError("Graph edge weights must be positive")
        if self.degree is None:
            self.degree = np.bincount(
                self.edges[:, 0], weights=self.weights, minlength=self.n_nodes
            )

    def weight_matrix(self, values=None):
        """Sparse symmetric matrix with ``values`` (default: weights) on edges."""
        vals = self.weights if values is None else values
        return coo_matrix(
            (vals, (self.edges[:, 0], self.edges[:, 1])),
            shape=(self.n_nodes, self.n_nodes),
        ).tocsr()

    def length_matrix(self):
        return self.weight_matrix(self.lengths)


@dataclass
class DistanceGrid:
    """
    One regular grid of the pyramid. Cell (i, j, k) has its center at
    ``origin + (index + 0.5) * cell_size``; ``channels[..., 0]`` is the unsigned
    distance and ``channels[..., 1:]`` its gradient.
    """

    origin: np.ndarray
    cell_size: float
    resolution: int
    channels: np.ndarray

    def cell_centers(self):
        ax = self.origin[0] + (np.arange(self.resolution) + 0.5) * self.cell_size
        ay = self.origin[1] + (np.arange(self.resolution) + 0.5) * self.cell_size
        az = self.origin[2] + (np.arange(self.resolution) + 0.5) * self.cell_size
        gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass
class DistanceGridPyramid:
    levels: List[DistanceGrid]

    @property
    def n_features(self):
        return CHANNELS_PER_LEVEL * len(self.levels)


def as_cloud(points, name="cloud"):
    """
    Validate and convert to an (n, 3) float array.

    :param array-like points: point coordinates
    :param str name: what to call the cloud in error messages
    :return numpy.ndarray: (n, 3) float64 copy-free view when possible
    :raise InvalidInputError: if the cloud is empty, misshapen or non-finite
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"{name} must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite coordinates")
    return arr


def _lowest_index_nearest(tree, cloud, queries):
    n = cloud.shape[0]
    k = min(_TIE_CANDIDATES, n)
    dist, idx = tree.query(queries, k=k)
    dist = np.asarray(dist).reshape(len(queries), k)
    idx = np.sort(np.asarray(idx, dtype=np.int64).reshape(len(queries), k), axis=1)
    diff = queries[:, None, :] - cloud[idx]
    sq = np.einsum("qnk,qnk->qn", diff, diff)
    pick = np.argmin(sq, axis=1)
    rows = np.arange(len(queries))
    best, d2 = idx[rows, pick], sq[rows, pick]
    # rows whose k candidates are all tied may have more equidistant points
    saturated = (k < n) & (dist[:, -1] <= dist[:, 0] * (1.0 + _TIE_RTOL) + _TIE_ATOL)
    for row in np.flatnonzero(saturated):
        radius = dist[row, 0] * (1.0 + _TIE_RTOL) + _TIE_ATOL
        candidates = np.sort(np.asarray(tree.query_ball_point(queries[row], radius), dtype=np.int64))
        diff = queries[row][None, :] - cloud[candidates]
        near = np.einsum("nk,nk->n", diff, diff)
        pick = int(np.argmin(near))
        best[row], d2[row] = candidates[pick], near[pick]
    return best, np.sqrt(d2)


def nearest_indices(queries, cloud):
    """
    Vectorized nearest-neighbor lookup.

    :param array-like queries: (q, 3) query points
    :param array-like cloud: (n, 3) cloud
    :return (numpy.ndarray, numpy.ndarray): index of the closest cloud point per
        query (lowest index on exact ties) and the Euclidean distance to it
    """
    cloud = as_cloud(cloud)
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    n = cloud.shape[0]
    if n > KDTREE_MIN_POINTS or n * len(queries) > BRUTE_FORCE_MAX_PAIRS:
        return _lowest_index_nearest(cKDTree(cloud), cloud, queries)
    idx = np.empty(len(queries), dtype=np.int64)
    d2 = np.empty(len(queries))
    chunk = max(1, BRUTE_FORCE_MAX_PAIRS // (4 * n))
    for start in range(0, len(queries), chunk):
        diff = queries[start : start + chunk, None, :] - cloud[None, :, :]
        sq = np.einsum("qnk,qnk->qn", diff, diff)
        best = np.argmin(sq, axis=1)
        idx[start : start + chunk] = best
        d2[start : start + chunk] = sq[np.arange(len(best)), best]
    return idx, np.sqrt(d2)


def nearest_neighbor(query, cloud):
    """
    Closest cloud point to a single query.

    :param array-like query: 3D point
    :param array-like cloud: non-empty point cloud
    :return (int, float): index of the closest point and its distance
    """
    idx, dist = nearest_indices(np.asarray(query, dtype=float).reshape(1, 3), cloud)
    return int(idx[0]), float(dist[0])


def chamfer_distance(a, b, mode="bidirectional"):
    """
    Mean squared nearest-neighbor distance between point sets.

    :param array-like a: first cloud
    :param array-like b: second cloud
    :param str mode: "a_to_b" for the one-sided mean over ``a``, or
        "bidirectional" for the sum of both one-sided means
    :return float: non-negative Chamfer value
    """
    a = as_cloud(a, "A")
    b = as_cloud(b, "B")
    if mode not in CHAMFER_MODES:
        raise InvalidInputError(f"Unknown Chamfer mode '{mode}'; use one of {CHAMFER_MODES}")
    _, d_ab = nearest_indices(a, b)
    value = float(np.mean(d_ab**2))
    if mode == "bidirectional":
        _, d_ba = nearest_indices(b, a)
        value += float(np.mean(d_ba**2))
    return value


def _knn_lists(cloud, k):
    n = cloud.shape[0]
    if n <= KDTREE_MIN_POINTS:
        diff = cloud[:, None, :] - cloud[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(sq, np.inf)
        order = np.argsort(sq, axis=1, kind="stable")[:, :k]
        return order, np.sqrt(np.take_along_axis(sq, order, axis=1))
    dist, idx = cKDTree(cloud).query(cloud, k=k + 1)
    keep = idx != np.arange(n)[:, None]
    # drop self (or, with duplicates, the last candidate)
    keep[np.arange(n), np.where(keep.all(axis=1), k, np.argmin(keep, axis=1))] = False
    return idx[keep].reshape(n, k), dist[keep].reshape(n, k)


def build_knn_graph(cloud, k=DEFAULT_KNN_K, weighting="gaussian", sigma=None):
    """
    Symmetrized k-nearest-neighbor graph (union of directed kNN edges).

    :param array-like cloud: (n, 3) points
    :param int k: neighbors per point, must be below n
    :param str weighting: "uniform" (all weights 1) or "gaussian"
        (exp(-d^2 / 2 sigma^2))
    :param float sigma: gaussian bandwidth; defaults to the mean kNN distance
    :return KnnGraph: the graph
    """
    cloud = as_cloud(cloud)
    n = cloud.shape[0]
    if k < 1 or k >= n:
        raise InvalidInputError(f"k must satisfy 1 <= k < n ({n}), got {k}")
    if weighting not in KNN_WEIGHTINGS:
        raise InvalidInputError(f"Unknown weighting '{weighting}'; use one of {KNN_WEIGHTINGS}")
    nbrs, dists = _knn_lists(cloud, k)
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    pairs = np.unique(
        np.concatenate(
            [np.stack([rows, cols], axis=1), np.stack([cols, rows], axis=1)]
        ),
        axis=0,
    )
    lengths = np.linalg.norm(cloud[pairs[:, 0]] - cloud[pairs[:, 1]], axis=1)
    if weighting == "uniform":
        weights = np.ones(len(pairs))
    else:
        if sigma is None:
            sigma = float(np.mean(dists))
        if not sigma > 0:
            raise InvalidInputError(f"Gaussian sigma must be positive, got {sigma}")
        weights = np.exp(-(lengths**2) / (2.0 * sigma**2))
        # far-apart neighbors may underflow; keep the edge with the smallest positive weight
        weights = np.maximum(weights, np.finfo(float).tiny)
    _LOGGER.debug(f"kNN graph: {n} nodes, {len(pairs) // 2} edges (k={k}, {weighting})")
    return KnnGraph(n_nodes=n, edges=pairs, weights=weights, lengths=lengths)


def graph_laplacian(graph):
    """
    Combinatorial Laplacian L = D - W as a dense symmetric matrix.

    :param KnnGraph graph: input graph
    :return numpy.ndarray: (n, n) Laplacian
    """
    w = graph.weight_matrix().toarray()
    return np.diag(w.sum(axis=1)) - w


def is_connected(graph):
    n_comp, _ = connected_components(graph.weight_matrix(), directed=False)
    return n_comp == 1


def graph_geodesics(graph, source):
    """
    Single-source shortest-path distances with Euclidean edge lengths.

    :param KnnGraph graph: input graph
    :param int source: source node index
    :return numpy.ndarray: distance per node, +inf where unreachable
    """
    if not 0 <= int(source) < graph.n_nodes:
        raise InvalidInputError(
            f"Source {source} out of range for a graph with {graph.n_nodes} nodes"
        )
    return dijkstra(graph.length_matrix(), directed=False, indices=int(source))


def graph_distance_matrix(graph):
    """All-pairs shortest-path distances (dense)."""
    return dijkstra(graph.length_matrix(), directed=False)


def _distance_grid(cloud, origin, cell_size, resolution):
    grid = DistanceGrid(
        origin=origin,
        cell_size=cell_size,
        resolution=resolution,
        channels=np.zeros((resolution, resolution, resolution, CHANNELS_PER_LEVEL)),
    )
    centers = grid.cell_centers().reshape(-1, 3)
    _, dist = nearest_indices(centers, cloud)
    dist = dist.reshape(resolution, resolution, resolution)
    grid.channels[..., 0] = dist
    # central differences inside, one-sided at the borders
    for axis, g in enumerate(np.gradient(dist, cell_size, edge_order=1)):
        grid.channels[..., axis + 1] = g
    return grid


def voxel_distance_pyramid(
    cloud,
    base_resolution=DEFAULT_BASE_RESOLUTION,
    levels=DEFAULT_LEVELS,
    half_extent=DEFAULT_HALF_EXTENT,
):
    """
    Multi-resolution unsigned distance grids of a normalized cloud.

    Level 0 has ``base_resolution`` cells per axis over the cube
    [-half_extent, half_extent]^3; each further level halves the resolution.

    :param array-like cloud: normalized point cloud
    :param int base_resolution: cells per axis at level 0
    :param int levels: number of levels
    :param float half_extent: half side of the covered cube
    :return DistanceGridPyramid: the pyramid
    """
    cloud = as_cloud(cloud)
    if base_resolution < 4:
        raise InvalidInputError(f"base_resolution must be >= 4, got {base_resolution}")
    if levels < 1 or base_resolution >> (levels - 1) < 2:
        raise InvalidInputError(
            f"{levels} levels cannot be halved from resolution {base_resolution}"
        )
    origin = np.full(3, -float(half_extent))
    grids = []
    for level in range(levels):
        res = base_resolution >> level
        grids.append(_distance_grid(cloud, origin, 2.0 * half_extent / res, res))
    return DistanceGridPyramid(levels=grids)


def _trilinear_level(grid, points):
    res = grid.resolution
    # continuous index where cell centers sit on integers; clamp to the outer centers
    u = np.clip((points - grid.origin) / grid.cell_size - 0.5, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    f = u - i0
    c = grid.channels
    out = np.zeros((len(points), CHANNELS_PER_LEVEL))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                vals = c[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out += (wx * wy * wz)[:, None] * vals
    return out


def trilinear_sample(pyramid, points):
    """
    Trilinearly interpolated [distance, grad x, grad y, grad z] at every level,
    concatenated. Points outside a grid are clamped to its boundary.

    :param DistanceGridPyramid pyramid: grids to sample
    :param array-like points: a single 3D point or a (q, 3) array
    :return numpy.ndarray: (4 * levels,) or (q, 4 * levels) features
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    feats = np.concatenate([_trilinear_level(g, pts) for g in pyramid.levels], axis=1)
    return feats[0] if single else feats


def normalize_cloud(cloud):
    """
    Center at the centroid and scale the bounding-box diagonal to 1.

    :param array-like cloud: input points
    :return (numpy.ndarray, NormalizationRecord): normalized points and the
        record needed to map results back
    :raise InvalidInputError: if all points coincide
    """
    cloud = as_cloud(cloud)
    centroid = cloud.mean(axis=0)
    diag = float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))
    if diag <= 0.0:
        raise InvalidInputError("Degenerate cloud: bounding-box diagonal is zero")
    record = NormalizationRecord(centroid=centroid, scale=diag)
    return apply_normalization(cloud, record), record


def apply_normalization(points, record):
    return (np.asarray(points, dtype=float) - record.centroid) / record.scale


def denormalize_cloud(points, record):
    return np.asarray(points, dtype=float) * record.scale + record.centroid


def read_xyz(path):
    """
    Read an ASCII XYZ file: three space-separated numbers per line, '#' lines
    are comments.

    :param str path: file to read
    :return numpy.ndarray: (n, 3) points
    """
    rows = []
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise InvalidInputError(f"{path}: not a UTF-8 text file: {e}")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 3:
            raise InvalidInputError(
                f"{path}:{lineno}: expected 3 fields, got {len(fields)}"
            )
        try:
            rows.append([float(v) for v in fields])
        except ValueError:
            raise InvalidInputError(f"{path}:{lineno}: non-numeric field")
    return as_cloud(np.array(rows, dtype=float).reshape(-1, 3), os.path.basename(path))


def write_xyz(path, points):
    """Write points as ASCII XYZ with LF line endings."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w", newline="\n") as f:
        for p in pts:
            f.write(f"{p[0]:.12f} {p[1]:.12f} {p[2]:.12f}\n")
    return os.path.abspath(path)
