"""
Inference-time refinement of the field on a single target (pick, for each
target sample, the vertex with the smallest predicted offset and push that
offset to zero), and classical point-to-point rigid ICP.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import InvalidInputError, NumericalDegeneracyError, StateError
from .geometry import RigidTransform, as_cloud, nearest_indices

_LOGGER = logging.getLogger(__name__)

DEFAULT_ICP_ITERS = 50
DEFAULT_ICP_TOL = 1e-10
# second singular value of the cross-covariance relative to the first
RANK_TOL = 1e-12

__all__ = [
    "Correspondence",
    "NicpConfig",
    "nicp_pair",
    "nicp_objective",
    "nicp_step",
    "nicp_refine",
    "write_nicp_trace",
    "best_fit_transform",
    "rigid_icp",
]


@dataclass
class Correspondence:
    """Per target sample: the selected template index and that offset's norm."""

    indices: np.ndarray
    norms: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.norms = np.asarray(self.norms, dtype=float).reshape(-1)
        if self.indices.shape != self.norms.shape:
            raise InvalidInputError("Correspondence indices and norms differ in length")
        if np.any(self.indices < 0) or np.any(self.norms < 0):
            raise InvalidInputError("Correspondence indices and norms must be non-negative")

    def __len__(self):
        return len(self.indices)


@dataclass
class NicpConfig:
    enabled: bool = True
    steps: int = 20
    lr: float = 1e-5
    max_samples: int = 2048
    # recompute correspondences (and draw new samples) on every step
    reselect: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidInputError(f"NICP needs at least one step, got {self.steps}")
        if not self.lr >= 0:
            raise InvalidInputError(f"NICP lr must be non-negative, got {self.lr}")
        if self.max_samples < 1:
            raise InvalidInputError("max_samples must be positive")

    @classmethod
    def from_mapping(cls, d):
        return cls(**{k: v for k, v in dict(d).items() if k in cls.__dataclass_fields__})


def nicp_pair(field, samples):
    """
    Select, for every sample, the template vertex whose uncapped predicted
    offset is shortest (lowest index on ties).

    :param NeuralDeformationField field: field bound to the target
    :param array-like samples: (K, 3) target points
    :return Correspondence: selection and norms
    """
    if not field.is_bound:
        raise StateError("Field has no bound target; call bind_target first")
    offsets = field.raw_offsets(np.asarray(samples, dtype=float).reshape(-1, 3))
    sq = np.einsum("kmc,kmc->km", offsets, offsets)
    idx = np.argmin(sq, axis=1)
    return Correspondence(indices=idx, norms=np.sqrt(sq[np.arange(len(idx)), idx]))


def nicp_objective(field, samples, corr, reduction="mean"):
    """
    Tape objective: sum (or mean) over samples of the squared selected offset.

    :return callable(dict[str, Tensor]) -> Tensor: objective over field parameters
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, 3)
    if len(samples) != len(corr):
        raise InvalidInputError(f"{len(samples)} samples but {len(corr)} correspondences")
    if len(corr) and corr.indices.max() >= field.n_vertices:
        raise InvalidInputError("Correspondence index out of range")
    feats = field.features(samples)
    heads = field.vertex_head[corr.indices]
    slots = field.vertex_slot[corr.indices]
    scale = 1.0 / len(samples) if reduction == "mean" else 1.0

    def objective(leaves):
        total = None
        for j in np.unique(heads):
            sel = np.flatnonzero(heads == j)
            m_j = len(field.head_vertices[j])
            rows = field.head_forward(leaves, j, feats[sel]).reshape((len(sel) * m_j, 3))
            picked = rows[np.arange(len(sel)) * m_j + slots[sel]]
            term = ad.sq_norm(picked)
            total = term if total is None else total + term
        return total * scale

    return objective


def nicp_step(field, samples, corr, lr, state=None):
    """
    One Adam step on the mean squared selected offset.

    :param NeuralDeformationField field: bound field, parameters replaced in place
    :param array-like samples: (K, 3) target samples
    :param Correspondence corr: selection for these samples
    :param float lr: learning rate
    :param AdamState state: optimizer state carried across steps
    :return (float, NeuralDeformationField, AdamState): summed loss before
        the step, the field and the new optimizer state
    """
    objective = nicp_objective(field, samples, corr, reduction="mean")
    mean_loss, grads = ad.value_and_grad(objective, field.params)
    state = ad.adam_init(field.params) if state is None else state
    state, field.params = ad.adam_step(state, field.params, grads, lr)
    return mean_loss * len(corr), field, state


def nicp_refine(field, target=None, config=None, seed=0):
    """
    Alternate correspondence selection and a parameter update.

    :param NeuralDeformationField field: field bound to ``target``; its
        parameters are updated in place
    :param array-like target: normalized target cloud (the bound one when None)
    :param NicpConfig config: step count, learning rate, sample budget
    :param int seed: sampling seed
    :return (NeuralDeformationField, list[dict]): field and per-step trace with
        ``step``, ``sum_loss`` and ``mean_loss``
    """
    config = NicpConfig() if config is None else config
    if not field.is_bound:
        raise StateError("Field has no bound target; call bind_target first")
    target = field.target if target is None else as_cloud(target, "target")
    rng = np.random.default_rng(seed)
    n = len(target)
    count = min(n, config.max_samples)
    state, samples, corr = None, None, None
    trace = []
    for step in range(config.steps):
        if config.reselect or samples is None:
            samples = target[rng.choice(n, size=count, replace=False)]
            corr = nicp_pair(field, samples)
        loss, field, state = nicp_step(field, samples, corr, config.lr, state)
        trace.append({"step": step + 1, "sum_loss": loss, "mean_loss": loss / count})
        _LOGGER.debug(f"NICP step {step + 1}: mean loss {loss / count:.6g}")
    _LOGGER.info(
        f"NICP: {config.steps} steps, mean loss {trace[0]['mean_loss']:.6g} -> {trace[-1]['mean_loss']:.6g}"
    )
    return field, trace


def write_nicp_trace(path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "sum_loss", "mean_loss"])
        for row in trace:
            writer.writerow([row["step"], repr(float(row["sum_loss"])), repr(float(row["mean_loss"]))])
    return path


def best_fit_transform(source, target, with_scale=False):
    """
    Closed-form least-squares alignment of paired points via the SVD of the
    cross-covariance, with the determinant corrected to exclude reflections.

    :param array-like source: (n, 3) points
    :param array-like target: (n, 3) paired points
    :param bool with_scale: also solve for a uniform scale
    :return (RigidTransform, float): transform and scale (1.0 unless solved)
        such that target ~ scale * R source + t
    :raise NumericalDegeneracyError: if the cross-covariance has rank < 2
    """
    src = as_cloud(source, "source")
    dst = as_cloud(target, "target")
    if src.shape != dst.shape:
        raise InvalidInputError(f"Paired clouds differ in shape: {src.shape} vs {dst.shape}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    h = a.T @ b
    u, s, vt = np.linalg.svd(h)
    if not s[0] > 0 or s[1] <= RANK_TOL * s[0]:
        raise NumericalDegeneracyError(f"Cross-covariance rank < 2 (singular values {s})")
    d = np.eye(3)
    d[2, 2] = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ d @ u.T
    scale = 1.0
    if with_scale:
        scale = float(np.sum(s * np.diag(d)) / np.sum(a * a))
    t = mu_d - scale * r @ mu_s
    return RigidTransform(r, t), scale


def rigid_icp(source, target, max_iters=DEFAULT_ICP_ITERS, tol=DEFAULT_ICP_TOL):
    """
    Point-to-point ICP from the identity.

    :param array-like source: (n, 3) cloud to move
    :param array-like target: (p, 3) fixed cloud
    :param int max_iters: alignment solves at most
    :param float tol: stop when the RMSE improves by less than this
    :return (RigidTransform, list[float]): transform mapping source onto
        target and the RMSE of the nearest-neighbor pairing at each iteration
    """
    src = as_cloud(source, "source")
    dst = as_cloud(target, "target")
    transform = RigidTransform.identity()
    history = []
    for it in range(max_iters + 1):
        idx, dist = nearest_indices(transform.apply(src), dst)
        rmse = float(np.sqrt(np.mean(dist**2)))
        history.append(rmse)
        if it > 0 and history[-2] - rmse < tol:
            break
        if it == max_iters:
            break
        transform, _ = best_fit_transform(src, dst[idx])
    _LOGGER.debug(f"Rigid ICP: {len(history)} iterations, RMSE {history[-1]:.3g}")
    return transform, history
