"""
The neural deformation field: a fixed multi-resolution distance featurizer of
the bound target followed by one MLP head per template segment. Querying a
point returns ordered offsets towards every template vertex.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .exceptions import InvalidInputError, StateError
from .geometry import (
    CHANNELS_PER_LEVEL,
    DEFAULT_BASE_RESOLUTION,
    DEFAULT_HALF_EXTENT,
    DEFAULT_LEVELS,
    as_cloud,
    trilinear_sample,
    voxel_distance_pyramid,
)
from .segmentation import Segmentation

_LOGGER = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 128, 128)
DEFAULT_OFFSET_CAP = 0.05
DEFAULT_ITERS = 50
# bound targets must be normalized: bounding-box diagonal within these limits
DIAGONAL_RANGE = (0.9, 1.1)
# initial output layer is shrunk so untrained offsets start small
HEAD_OUTPUT_SCALE = 0.1
UNIFORM_QUERY_HALF_EXTENT = 0.5
INFERENCE_MODES = ("lvd", "oneshot")

__all__ = [
    "NeuralDeformationField",
    "FieldQueryResult",
    "TrainConfig",
    "field_query",
    "cap_rows",
    "sample_training_queries",
    "train_field",
    "infer_vertices",
    "write_loss_history",
]


def cap_rows(offsets, cap):
    """Rescale rows (last axis) whose norm exceeds ``cap`` down to norm ``cap``."""
    offsets = np.asarray(offsets, dtype=float)
    norms = np.linalg.norm(offsets, axis=-1, keepdims=True)
    over = norms > cap
    return np.where(over, offsets * (cap / np.where(over, norms, 1.0)), offsets)


@dataclass
class FieldQueryResult:
    """Offsets from one query point to all template vertices, with their norms."""

    offsets: np.ndarray
    norms: np.ndarray


class NeuralDeformationField(object):
    """
    Multi-head deformation field over a template.

    Head ``j`` owns the vertices of segment ``j`` and maps the query feature
    (pyramid samples plus raw coordinates) to 3 offsets per owned vertex.
    Parameters of head ``j`` are named ``h{j}.w{i}`` and ``h{j}.b{i}`` in a
    single ``ParamStore``.
    """

    def __init__(
        self,
        template,
        segmentation=None,
        hidden=DEFAULT_HIDDEN,
        offset_cap=DEFAULT_OFFSET_CAP,
        base_resolution=DEFAULT_BASE_RESOLUTION,
        levels=DEFAULT_LEVELS,
        half_extent=DEFAULT_HALF_EXTENT,
        seed=0,
        params=None,
    ):
        """
        :param TemplateModel template: template whose vertices are predicted
        :param Segmentation segmentation: vertex-to-head assignment; one head
            for all vertices when None
        :param Iterable[int] hidden: hidden layer widths of every head
        :param float offset_cap: maximum offset norm when capping
        :param int base_resolution: finest pyramid resolution
        :param int levels: pyramid levels
        :param float half_extent: half side of the cube the pyramid covers
        :param int seed: initialization seed
        :param ParamStore params: parameters to adopt instead of initializing
        """
        if not offset_cap > 0:
            raise InvalidInputError(f"offset_cap must be positive, got {offset_cap}")
        m = template.n_vertices
        if segmentation is None:
            segmentation = Segmentation.single(m)
        if len(segmentation.labels) != m:
            raise InvalidInputError(
                f"Segmentation labels {len(segmentation.labels)} vertices, template has {m}"
            )
        self.template = template
        self.segmentation = segmentation
        self.offset_cap = float(offset_cap)
        self.hidden = tuple(int(h) for h in hidden)
        self.encoder = {
            "base_resolution": int(base_resolution),
            "levels": int(levels),
            "half_extent": float(half_extent),
        }
        self.head_vertices = [segmentation.members(j) for j in range(segmentation.n_segments)]
        self.vertex_head = segmentation.labels.copy()
        self.vertex_slot = np.empty(m, dtype=np.int64)
        for verts in self.head_vertices:
            self.vertex_slot[verts] = np.arange(len(verts))
        in_width = CHANNELS_PER_LEVEL * self.encoder["levels"] + 3
        self.head_specs = [
            ad.MlpSpec((in_width,) + self.hidden + (3 * len(v),)) for v in self.head_vertices
        ]
        if params is None:
            rng = np.random.default_rng(seed)
            params = ad.ParamStore()
            for j, spec in enumerate(self.head_specs):
                ad.init_mlp_params(spec, rng, self.prefix(j), params, last_scale=HEAD_OUTPUT_SCALE)
        self.params = params
        self._check_params()
        self.pyramid = None
        self.target = None

    def _check_params(self):
        expected = [n for j, s in enumerate(self.head_specs) for n in s.param_names(self.prefix(j))]
        if sorted(expected) != sorted(self.params.keys()):
            raise InvalidInputError("Parameter names do not match the head layout")

    @staticmethod
    def prefix(j):
        return f"h{j}."

    @property
    def n_vertices(self):
        return self.template.n_vertices

    @property
    def n_heads(self):
        return len(self.head_specs)

    @property
    def input_width(self):
        return self.head_specs[0].widths[0]

    @property
    def is_bound(self):
        return self.pyramid is not None

    def head_param_names(self, j):
        return self.head_specs[j].param_names(self.prefix(j))

    def bind_target(self, target):
        """
        Featurize a normalized target; subsequent queries refer to it.

        :param array-like target: (n, 3) normalized cloud
        :return NeuralDeformationField: self
        :raise InvalidInputError: if the bounding-box diagonal is outside [0.9, 1.1]
        """
        cloud = as_cloud(target, "target")
        diag = float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))
        lo, hi = DIAGONAL_RANGE
        if not lo <= diag <= hi:
            raise InvalidInputError(
                f"Target is not normalized: bounding-box diagonal {diag:.4f} outside [{lo}, {hi}]"
            )
        self.pyramid = voxel_distance_pyramid(cloud, **self.encoder)
        self.target = cloud
        return self

    def features(self, points):
        """(q, 4 * levels + 3) query features."""
        if not self.is_bound:
            raise StateError("Field has no bound target; call bind_target first")
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.concatenate([trilinear_sample(self.pyramid, pts), pts], axis=1)

    def head_forward(self, params, j, feats):
        """
        Head ``j`` on precomputed features; array or tape path depending on
        ``params``.

        :return numpy.ndarray | Tensor: (q, m_j, 3) raw offsets
        """
        out = ad.mlp_forward(self.head_specs[j], params, feats, prefix=self.prefix(j))
        shape = (len(feats), len(self.head_vertices[j]), 3)
        return out.reshape(shape)

    def raw_offsets(self, points):
        """
        Uncapped offsets from every query point to every vertex.

        :param array-like points: (q, 3) queries
        :return numpy.ndarray: (q, m, 3)
        """
        feats = self.features(points)
        out = np.empty((len(feats), self.n_vertices, 3))
        for j, verts in enumerate(self.head_vertices):
            out[:, verts, :] = self.head_forward(self.params, j, feats)
        return out

    def query(self, points, capped=True):
        out = self.raw_offsets(points)
        return cap_rows(out, self.offset_cap) if capped else out

    def vertex_offsets(self, points, capped=True):
        """
        Each tracker's own offset row: row ``i`` is F(points[i])_i.

        :param array-like points: (m, 3) tracker positions, one per vertex
        :param bool capped: apply the offset cap
        :return numpy.ndarray: (m, 3)
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) != self.n_vertices:
            raise InvalidInputError(f"Expected {self.n_vertices} trackers, got {len(pts)}")
        out = np.empty_like(pts)
        for j, verts in enumerate(self.head_vertices):
            rows = self.head_forward(self.params, j, self.features(pts[verts]))
            own = np.arange(len(verts))
            out[verts] = rows[own, own]
        return cap_rows(out, self.offset_cap) if capped else out

    def clone(self):
        """Copy with independent parameters; the bound target is shared."""
        other = NeuralDeformationField(
            self.template,
            self.segmentation,
            hidden=self.hidden,
            offset_cap=self.offset_cap,
            params=self.params.copy(),
            **self.encoder,
        )
        other.pyramid = self.pyramid
        other.target = self.target
        return other

    def __repr__(self):
        return (
            f"{type(self).__name__}(m={self.n_vertices}, heads={self.n_heads}, "
            f"hidden={self.hidden}, cap={self.offset_cap}, bound={self.is_bound})"
        )


def field_query(field, queries, capped=True):
    """
    Query the field at a list of points.

    :param NeuralDeformationField field: bound field
    :param array-like queries: (q, 3) points
    :param bool capped: cap every offset row at the field's ``offset_cap``
    :return list[FieldQueryResult]: one result per query
    """
    offsets = field.query(queries, capped=capped)
    norms = np.linalg.norm(offsets, axis=-1)
    return [FieldQueryResult(offsets=o, norms=n) for o, n in zip(offsets, norms)]


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 1
    n_uniform: int = 400
    n_surface: int = 1800
    surface_sigma: float = 0.05
    # draw fresh queries every epoch instead of a fixed set per shape
    resample_queries: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if self.lr < 0 or self.surface_sigma < 0:
            raise InvalidInputError("lr and surface_sigma must be non-negative")
        if self.n_uniform < 0 or self.n_surface < 0 or self.n_uniform + self.n_surface == 0:
            raise InvalidInputError("Query counts must be non-negative and not both zero")

    @classmethod
    def from_mapping(cls, d):
        return cls(**{k: v for k, v in dict(d).items() if k in cls.__dataclass_fields__})


def sample_training_queries(pair, rng, config=None, cap=DEFAULT_OFFSET_CAP):
    """
    Training queries for one shape with their supervision.

    :param GroundTruthPair pair: normalized target and ground-truth vertices
    :param numpy.random.Generator rng: randomness source
    :param TrainConfig config: query counts and noise level
    :param float cap: supervision rows are capped to this norm
    :return (numpy.ndarray, numpy.ndarray): (q, 3) queries, uniform ones
        first, and (q, m, 3) capped offsets ``gt_vertices - query``
    """
    config = TrainConfig() if config is None else config
    h = UNIFORM_QUERY_HALF_EXTENT
    uniform = rng.uniform(-h, h, size=(config.n_uniform, 3))
    picks = rng.integers(0, len(pair.target), size=config.n_surface)
    surface = pair.target[picks] + rng.normal(0.0, config.surface_sigma, size=(config.n_surface, 3))
    queries = np.concatenate([uniform, surface])
    supervision = pair.gt_vertices[None, :, :] - queries[:, None, :]
    return queries, cap_rows(supervision, cap)


def _training_loss(field, feats, supervision):
    m = field.n_vertices

    def objective(leaves):
        total = None
        for j, verts in enumerate(field.head_vertices):
            pred = ad.clip_norm(field.head_forward(leaves, j, feats), field.offset_cap)
            term = ad.mean(ad.absolute(pred - supervision[:, verts, :])) * (len(verts) / m)
            total = term if total is None else total + term
        return total

    return objective


def _query_rng(seed, epoch, index, resample):
    return np.random.default_rng([seed, epoch, index] if resample else [seed, index])


def train_field(field, dataset, config=None, seed=0):
    """
    Fit the heads to synthetic supervision: for every shape, L1 between the
    capped predicted offsets and the capped ground-truth offsets, one Adam
    step per batch of shapes.

    :param NeuralDeformationField field: field to train, mutated in place
    :param Sequence[GroundTruthPair] dataset: normalized training pairs
    :param TrainConfig config: schedule and query sampling
    :param int seed: query sampling seed
    :return (NeuralDeformationField, list[float]): the field and the mean
        pre-step loss of every epoch
    """
    config = TrainConfig() if config is None else config
    n_shapes = len(dataset)
    if n_shapes == 0:
        raise InvalidInputError("Training dataset is empty")
    state = ad.adam_init(field.params)
    history = []
    for epoch in range(config.epochs):
        losses = np.zeros(n_shapes)
        for start in range(0, n_shapes, config.batch_size):
            batch = range(start, min(start + config.batch_size, n_shapes))
            summed = None
            for i in batch:
                pair = dataset[i]
                field.bind_target(pair.target)
                rng = _query_rng(seed, epoch, i, config.resample_queries)
                queries, supervision = sample_training_queries(pair, rng, config, field.offset_cap)
                objective = _training_loss(field, field.features(queries), supervision)
                losses[i], grads = ad.value_and_grad(objective, field.params)
                if summed is None:
                    summed = grads
                else:
                    for k in summed:
                        summed[k] = summed[k] + grads[k]
            for k in summed:
                summed[k] = summed[k] / len(batch)
            state, field.params = ad.adam_step(state, field.params, summed, config.lr)
        history.append(float(np.mean(losses)))
        _LOGGER.info(f"Epoch {epoch + 1}/{config.epochs}: mean loss {history[-1]:.6f}")
    return field, history


def infer_vertices(field, mode="lvd", iters=DEFAULT_ITERS, seed=0, trajectory=None):
    """
    Move one tracker per template vertex through the field.

    In "lvd" mode trackers start at the origin and take ``iters`` capped
    steps along their own offset row. In "oneshot" mode they start on random
    target points and take a single uncapped step.

    :param NeuralDeformationField field: bound field (or any object with
        ``is_bound``, ``n_vertices``, ``target`` and ``vertex_offsets``)
    :param str mode: "lvd" or "oneshot"
    :param int iters: lvd step count
    :param int seed: oneshot initialization seed
    :param list trajectory: if given, receives every intermediate tracker array
    :return numpy.ndarray: (m, 3) predicted vertices
    """
    if not field.is_bound:
        raise StateError("Field has no bound target; call bind_target first")
    if mode not in INFERENCE_MODES:
        raise InvalidInputError(f"Unknown inference mode '{mode}'; use one of {INFERENCE_MODES}")
    m = field.n_vertices
    if mode == "lvd":
        x = np.zeros((m, 3))
        steps, capped = int(iters), True
    else:
        rng = np.random.default_rng(seed)
        target = field.target
        idx = rng.choice(len(target), size=m, replace=len(target) < m)
        x = np.array(target[idx], dtype=float)
        steps, capped = 1, False
    if trajectory is not None:
        trajectory.append(x.copy())
    for _ in range(steps):
        x = x + field.vertex_offsets(x, capped=capped)
        if trajectory is not None:
            trajectory.append(x.copy())
    _LOGGER.debug(f"{mode} inference: {steps} steps")
    return x


def write_loss_history(path, history):
    """Write ``epoch,mean_loss`` rows, epochs counted from 1."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss"])
        for epoch, loss in enumerate(history, start=1):
            writer.writerow([epoch, repr(float(loss))])
    return path
