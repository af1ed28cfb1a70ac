"""
Stages after field convergence: fit the articulated template to the
predicted vertices, refine its parameters against the target with a Chamfer
objective, optionally add Laplacian-regularized per-vertex displacements.
``register`` chains the whole pipeline on a raw target cloud.
"""

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .exceptions import InvalidInputError, NumericalDegeneracyError
from .field import INFERENCE_MODES, infer_vertices
from .geometry import (
    NormalizationRecord,
    as_cloud,
    chamfer_distance,
    denormalize_cloud,
    nearest_indices,
    normalize_cloud,
    write_xyz,
)
from .nicp import NicpConfig, best_fit_transform, nicp_refine, write_nicp_trace
from .skeleton import PoseShapeParams, pose_template, pose_template_tensor

_LOGGER = logging.getLogger(__name__)

CHAMFER_REFINE_MODES = ("bidirectional", "one_directional")
INIT_METHODS = ("centroid", "similarity")
MIN_TARGET_POINTS = 100
STAGES = ("nicp", "convergence", "fit", "chamfer", "displacements")

__all__ = [
    "RefineConfig",
    "RegistrationResult",
    "initial_params",
    "fit_template_params",
    "chamfer_refine",
    "chamfer_objective",
    "laplacian_smoothness",
    "displacement_refine",
    "register",
    "write_result",
]


@dataclass
class RefineConfig:
    mode: str = "lvd"
    iters: int = 50
    fit: bool = True
    chamfer: bool = True
    displacements: bool = False
    fit_steps: int = 2000
    fit_lr: float = 1e-1
    chamfer_steps: int = 500
    chamfer_lr: float = 2e-2
    chamfer_mode: str = "bidirectional"
    pose_weight: float = 1e-8
    scale_weight: float = 1e-2
    displacement_steps: int = 500
    displacement_lr: float = 1e-3
    lambda_off: float = 1e-2
    lambda_lap: float = 1.0
    init: str = "centroid"

    def __post_init__(self):
        if self.init not in INIT_METHODS:
            raise InvalidInputError(f"Unknown initialization '{self.init}'; use one of {INIT_METHODS}")
        if self.mode not in INFERENCE_MODES:
            raise InvalidInputError(f"Unknown inference mode '{self.mode}'")
        if self.chamfer_mode not in CHAMFER_REFINE_MODES:
            raise InvalidInputError(
                f"Unknown Chamfer mode '{self.chamfer_mode}'; use one of {CHAMFER_REFINE_MODES}"
            )
        weights = (self.pose_weight, self.scale_weight, self.lambda_off, self.lambda_lap)
        if min(weights) < 0:
            raise InvalidInputError("Penalty weights must be non-negative")
        steps = (self.fit_steps, self.chamfer_steps, self.displacement_steps)
        if min(steps) < 0 or self.iters < 1:
            raise InvalidInputError("Step counts must be non-negative and iters positive")
        if min(self.fit_lr, self.chamfer_lr, self.displacement_lr) < 0:
            raise InvalidInputError("Learning rates must be non-negative")

    @classmethod
    def from_mapping(cls, d):
        return cls(**{k: v for k, v in dict(d).items() if k in cls.__dataclass_fields__})


@dataclass
class RegistrationResult:
    """
    Output of ``register`` in the target's original units.

    ``vertices`` equals ``pose_template(params) + displacements`` whenever
    parameters were fitted; ``converged_vertices`` are the field's prediction.
    """

    vertices: np.ndarray
    converged_vertices: np.ndarray
    record: NormalizationRecord
    params: Optional[PoseShapeParams] = None
    displacements: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def _penalty(leaves, config):
    pose = ad.sq_norm(leaves["joint_rotations"]) * config.pose_weight
    scale = ad.sq_norm(leaves["length_scales"] - 1.0) + ad.sq_norm(leaves["radius_scales"] - 1.0)
    return pose + scale * config.scale_weight


def _l1_objective(template, predicted, config):
    m = template.n_vertices

    def objective(leaves):
        posed = pose_template_tensor(template, leaves)
        return ad.tsum(ad.absolute(posed - predicted)) * (1.0 / m) + _penalty(leaves, config)

    return objective


def _centroid_params(template, predicted):
    shift = predicted.mean(axis=0) - template.rest_vertices.mean(axis=0)
    return PoseShapeParams.rest(template.n_bones, translation=shift)


def initial_params(template, predicted, method="centroid"):
    """
    Rest pose placed on the predicted vertices. "centroid" shifts the rest
    template onto their centroid; "similarity" also tries a least-squares
    similarity alignment and keeps whichever is closer in mean L1.

    :param TemplateModel template: template to place
    :param array-like predicted: (m, 3) target vertex positions
    :param str method: "centroid" or "similarity"
    :return PoseShapeParams: starting parameters
    """
    predicted = as_cloud(predicted, "predicted")
    if method not in INIT_METHODS:
        raise InvalidInputError(f"Unknown initialization '{method}'; use one of {INIT_METHODS}")
    if method == "centroid":
        return _centroid_params(template, predicted)
    candidates = [_centroid_params(template, predicted)]
    try:
        transform, scale = best_fit_transform(template.rest_vertices, predicted, with_scale=True)
        candidates.append(
            PoseShapeParams.rest(
                template.n_bones, translation=transform.translation, global_scale=scale
            )
        )
        candidates[-1].global_rotation = Rotation.from_matrix(transform.rotation).as_rotvec()
    except NumericalDegeneracyError:
        _LOGGER.warning("Predicted vertices are degenerate; using a centroid shift")
    errors = [
        np.abs(pose_template(template, p, check=False) - predicted).sum(axis=1).mean()
        for p in candidates
    ]
    return candidates[int(np.argmin(errors))]


def _adam_descent(template, params, objective, steps, lr, tag):
    """
    Projected Adam on pose/shape parameters; returns the iterate with the
    lowest objective seen (the start included) and the objective trace.
    """
    store = params.to_store()
    state = ad.adam_init(store)
    best_value, best = math.inf, params.copy()
    trace = []
    for step in range(steps):
        value, grads = ad.value_and_grad(objective, store)
        trace.append(value)
        if value < best_value:
            best_value, best = value, PoseShapeParams.from_store(store)
        state, store = ad.adam_step(state, store, grads, lr)
        store = PoseShapeParams.from_store(store).project(template.skeleton).to_store()
    if steps:
        value = float(objective({k: ad.Tensor(v) for k, v in store.items()}).value)
        trace.append(value)
        if value < best_value:
            best_value, best = value, PoseShapeParams.from_store(store)
        _LOGGER.info(f"{tag}: {steps} steps, objective {trace[0]:.6g} -> {best_value:.6g}")
    return best, trace


def fit_template_params(template, predicted, config=None):
    """
    Fit pose and shape to predicted vertices with Adam on the mean L1 vertex
    distance plus pose-magnitude and scale-deviation penalties.

    :param TemplateModel template: template to fit
    :param array-like predicted: (m, 3) predicted vertices, same order as the template
    :param RefineConfig config: steps, learning rate and penalty weights
    :return (PoseShapeParams, list[float]): fitted parameters and objective trace
    """
    config = RefineConfig() if config is None else config
    predicted = as_cloud(predicted, "predicted")
    if len(predicted) != template.n_vertices:
        raise InvalidInputError(
            f"Expected {template.n_vertices} predicted vertices, got {len(predicted)}"
        )
    start = initial_params(template, predicted, config.init)
    objective = _l1_objective(template, predicted, config)
    return _adam_descent(template, start, objective, config.fit_steps, config.fit_lr, "Fit")


def _chamfer_terms(points, target, mode):
    """Tape Chamfer between a tensor point set and a fixed cloud, indices from current values."""
    total = None
    if mode == "bidirectional":
        idx, _ = nearest_indices(points.value, target)
        total = ad.sq_norm(points - target[idx]) * (1.0 / len(idx))
    idx, _ = nearest_indices(target, points.value)
    term = ad.sq_norm(points[idx] - target) * (1.0 / len(target))
    return term if total is None else total + term


def chamfer_objective(template, target, config):
    def objective(leaves):
        posed = pose_template_tensor(template, leaves)
        return _chamfer_terms(posed, target, config.chamfer_mode) + _penalty(leaves, config)

    return objective


def chamfer_refine(template, params, target, config=None):
    """
    Refine parameters by Adam on the Chamfer distance to the target plus the
    fitting penalties. Nearest neighbors are recomputed at every step.

    In "one_directional" mode only target points pull on the template, which
    suits targets with missing parts.

    :param TemplateModel template: template
    :param PoseShapeParams params: starting parameters
    :param array-like target: normalized target cloud
    :param RefineConfig config: steps, learning rate, mode and weights
    :return (PoseShapeParams, list[float]): refined parameters and objective trace
    """
    config = RefineConfig() if config is None else config
    target = as_cloud(target, "target")
    objective = chamfer_objective(template, target, config)
    return _adam_descent(
        template, params, objective, config.chamfer_steps, config.chamfer_lr, "Chamfer"
    )


def laplacian_smoothness(laplacian, vertices, displacements):
    """
    Mean squared change of the Laplacian coordinates caused by displacing
    the vertices.

    :param array-like laplacian: (m, m) graph Laplacian
    :param array-like vertices: (m, 3) vertices
    :param array-like displacements: (m, 3) per-vertex displacements
    :return float: (1/m) sum_i ||(L(V + O))_i - (LV)_i||^2
    """
    lap = np.asarray(laplacian, dtype=float)
    v = np.asarray(vertices, dtype=float)
    o = np.asarray(displacements, dtype=float)
    m = lap.shape[0]
    if lap.shape != (m, m) or v.shape != (m, 3) or o.shape != (m, 3):
        raise InvalidInputError(
            f"Shape mismatch: L {lap.shape}, V {v.shape}, O {o.shape}"
        )
    diff = lap @ (v + o) - lap @ v
    return float(np.sum(diff * diff) / m)


def _cosine_lr(lr, step, steps):
    return lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))


def displacement_refine(template, params, target, config=None):
    """
    Per-vertex displacements on top of the posed template: Adam on
    Chamfer(V + O, target) + lambda_off mean ||O_i||^2 + lambda_lap
    laplacian_smoothness, with a cosine-decayed learning rate. The parameters
    stay fixed.

    :param TemplateModel template: template (its rest-graph Laplacian is used)
    :param PoseShapeParams params: fitted parameters
    :param array-like target: normalized target cloud
    :param RefineConfig config: steps, learning rate and weights
    :return (numpy.ndarray, list[float]): (m, 3) displacements and objective trace
    """
    config = RefineConfig() if config is None else config
    target = as_cloud(target, "target")
    posed = pose_template(template, params, check=False)
    lap = template.laplacian
    m = template.n_vertices

    def objective(leaves):
        o = leaves["displacements"]
        energy = ad.sq_norm(ad.matmul(lap, o)) * (config.lambda_lap / m)
        offset = ad.sq_norm(o) * (config.lambda_off / m)
        return _chamfer_terms(o + posed, target, config.chamfer_mode) + offset + energy

    store = ad.ParamStore({"displacements": np.zeros((m, 3))})
    state = ad.adam_init(store)
    trace = []
    for step in range(config.displacement_steps):
        value, grads = ad.value_and_grad(objective, store)
        trace.append(value)
        lr = _cosine_lr(config.displacement_lr, step, config.displacement_steps)
        state, store = ad.adam_step(state, store, grads, lr)
    if trace:
        _LOGGER.info(f"Displacements: {len(trace)} steps, objective {trace[0]:.6g} -> {trace[-1]:.6g}")
    return np.array(store["displacements"]), trace


def _params_to_raw(params, record):
    out = params.copy()
    out.global_scale = params.global_scale * record.scale
    out.translation = params.translation * record.scale + record.centroid
    return out


def _section(config, name, cls):
    if config is None:
        return cls()
    if isinstance(config, cls):
        return config
    return cls.from_mapping(config.get(name, {}) if name in config else {})


def register(field, target, config=None, seed=0, nicp_config=None, refine_config=None):
    """
    Register the template to a raw target cloud.

    Normalize, bind a private copy of the field, refine it with NICP, let the
    trackers converge, then fit, Chamfer-refine and optionally displace, and
    map everything back to the target's units.

    :param NeuralDeformationField field: trained field (left unchanged)
    :param array-like target: (n, 3) raw cloud, n >= 100
    :param Mapping config: pipeline settings with "nicp" and "refinement" sections
    :param int seed: seed for NICP sampling and oneshot initialization
    :param NicpConfig nicp_config: overrides the "nicp" section
    :param RefineConfig refine_config: overrides the "refinement" section
    :return RegistrationResult: the registration
    """
    target = as_cloud(target, "target")
    if len(target) < MIN_TARGET_POINTS:
        raise InvalidInputError(
            f"Target needs at least {MIN_TARGET_POINTS} points, got {len(target)}"
        )
    nicp_cfg = nicp_config or _section(config, "nicp", NicpConfig)
    refine = refine_config or _section(config, "refinement", RefineConfig)
    template = field.template
    normalized, record = normalize_cloud(target)
    diagnostics = {s: {"status": "skipped"} for s in STAGES}
    timings = {}

    clock = time.perf_counter()
    work = field.clone().bind_target(normalized)
    timings["bind"] = time.perf_counter() - clock

    if nicp_cfg.enabled:
        clock = time.perf_counter()
        work, trace = nicp_refine(work, normalized, nicp_cfg, seed=seed)
        timings["nicp"] = time.perf_counter() - clock
        diagnostics["nicp"] = {"status": "ran", "trace": trace}
    else:
        _LOGGER.info("NICP disabled; using the field as trained")

    clock = time.perf_counter()
    predicted = infer_vertices(work, refine.mode, refine.iters, seed=seed)
    timings["convergence"] = time.perf_counter() - clock
    diagnostics["convergence"] = {"status": "ran", "mode": refine.mode, "iters": refine.iters}

    params, displacements = None, None
    if not refine.fit and (refine.chamfer or refine.displacements):
        params = initial_params(template, predicted, refine.init)
    if refine.fit:
        clock = time.perf_counter()
        params, trace = fit_template_params(template, predicted, refine)
        timings["fit"] = time.perf_counter() - clock
        diagnostics["fit"] = {"status": "ran", "trace": trace}
    if refine.chamfer:
        clock = time.perf_counter()
        params, trace = chamfer_refine(template, params, normalized, refine)
        timings["chamfer"] = time.perf_counter() - clock
        final = pose_template(template, params, check=False)
        mode = "bidirectional" if refine.chamfer_mode == "bidirectional" else "a_to_b"
        diagnostics["chamfer"] = {
            "status": "ran",
            "mode": refine.chamfer_mode,
            "trace": trace,
            "final": chamfer_distance(normalized, final, mode),
        }
    if refine.displacements:
        clock = time.perf_counter()
        displacements, trace = displacement_refine(template, params, normalized, refine)
        timings["displacements"] = time.perf_counter() - clock
        diagnostics["displacements"] = {"status": "ran", "trace": trace}

    if params is None:
        vertices = denormalize_cloud(predicted, record)
        raw_params = None
    else:
        raw_params = _params_to_raw(params, record)
        vertices = pose_template(template, raw_params, check=False)
        if displacements is not None:
            displacements = displacements * record.scale
            vertices = vertices + displacements
    return RegistrationResult(
        vertices=vertices,
        converged_vertices=denormalize_cloud(predicted, record),
        record=record,
        params=raw_params,
        displacements=displacements,
        diagnostics=diagnostics,
        timings=timings,
    )


def _write_json(path, data):
    with open(path, "w", newline="\n") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def write_result(out_dir, result, include_timings=False):
    """
    Write a registration: vertices.xyz, converged.xyz, params.json (when
    fitted), displacements.xyz (when computed), nicp_trace.csv (when NICP
    ran) and diagnostics.json.

    Timings vary between runs, so they go into diagnostics.json only when
    asked for.

    :param str out_dir: destination directory, created if missing
    :param RegistrationResult result: registration to write
    :param bool include_timings: add per-stage seconds to diagnostics.json
    :return str: absolute path of the directory
    """
    os.makedirs(out_dir, exist_ok=True)
    write_xyz(os.path.join(out_dir, "vertices.xyz"), result.vertices)
    write_xyz(os.path.join(out_dir, "converged.xyz"), result.converged_vertices)
    if result.params is not None:
        _write_json(os.path.join(out_dir, "params.json"), result.params.to_dict())
    if result.displacements is not None:
        write_xyz(os.path.join(out_dir, "displacements.xyz"), result.displacements)
    nicp = result.diagnostics.get("nicp", {})
    if nicp.get("status") == "ran":
        write_nicp_trace(os.path.join(out_dir, "nicp_trace.csv"), nicp["trace"])
    diagnostics = {"stages": result.diagnostics, "normalization": result.record.to_dict()}
    if include_timings:
        diagnostics["timings"] = result.timings
    _write_json(os.path.join(out_dir, "diagnostics.json"), diagnostics)
    _LOGGER.info(f"Wrote registration to '{out_dir}'")
    return os.path.abspath(out_dir)
