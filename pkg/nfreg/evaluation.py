"""
Registration metrics (vertex-to-vertex error, geodesic correspondence error
curves, improvement statistics) and the benchmark harness that runs a
method matrix over a test set.
"""

import csv
import json
import logging
import os
import re
import time
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .exceptions import InvalidInputError
from .fitting import RefineConfig, register
from .geometry import (
    as_cloud,
    denormalize_cloud,
    graph_distance_matrix,
    is_connected,
    nearest_indices,
    normalize_cloud,
)
from .nicp import NicpConfig, rigid_icp
from .synthetic import shape_seeds

_LOGGER = logging.getLogger(__name__)

DEFAULT_THRESHOLD_COUNT = 101
DEFAULT_MAX_THRESHOLD = 0.5
METHOD_MODES = ("lvd", "oneshot", "rigid_icp")
METHOD_STAGES = ("convergence", "fit", "chamfer", "displacements")

__all__ = [
    "ErrorCurve",
    "MethodSpec",
    "BenchmarkReport",
    "default_thresholds",
    "v2v_error",
    "geodesic_errors",
    "geodesic_error_curve",
    "error_curve",
    "improvement_rate",
    "mean_relative_improvement",
    "run_benchmark",
    "write_report",
]


@dataclass
class ErrorCurve:
    """Fraction of correspondences with error at or below each threshold."""

    thresholds: np.ndarray
    fractions: np.ndarray
    auc: float

    def to_dict(self):
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "fractions": [float(f) for f in self.fractions],
            "auc": float(self.auc),
        }


def default_thresholds(count=DEFAULT_THRESHOLD_COUNT, max_threshold=DEFAULT_MAX_THRESHOLD):
    return np.linspace(0.0, max_threshold, int(count))


def v2v_error(pred, gt, record=None):
    """
    Per-vertex Euclidean error.

    :param array-like pred: (m, 3) predicted vertices
    :param array-like gt: (m, 3) ground truth
    :param NormalizationRecord record: when given, both inputs are taken to
        be normalized and the errors are reported in original units
    :return (float, numpy.ndarray): mean error and (m,) per-vertex errors
    """
    pred = as_cloud(pred, "pred")
    gt = as_cloud(gt, "gt")
    if pred.shape != gt.shape:
        raise InvalidInputError(f"Vertex counts differ: {len(pred)} vs {len(gt)}")
    per_vertex = np.linalg.norm(pred - gt, axis=1)
    if record is not None:
        per_vertex = per_vertex * record.scale
    return float(per_vertex.mean()), per_vertex


def geodesic_errors(pred_corr, gt_corr, graph, distances=None):
    """
    Graph geodesic between predicted and true template indices, divided by
    the graph diameter.

    :param array-like pred_corr: predicted template index per target point
    :param array-like gt_corr: true template index per target point
    :param KnnGraph graph: connected template graph
    :param numpy.ndarray distances: precomputed all-pairs distances of ``graph``
    :return numpy.ndarray: normalized error per target point
    """
    pred = np.asarray(pred_corr, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_corr, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"Correspondence lengths differ: {len(pred)} vs {len(gt)}")
    for name, idx in (("pred_corr", pred), ("gt_corr", gt)):
        if len(idx) and (idx.min() < 0 or idx.max() >= graph.n_nodes):
            raise InvalidInputError(f"{name} has indices outside [0, {graph.n_nodes})")
    if distances is None:
        if not is_connected(graph):
            raise InvalidInputError("Template graph is disconnected; geodesics are undefined")
        distances = graph_distance_matrix(graph)
    diameter = float(distances.max())
    if not np.isfinite(diameter):
        raise InvalidInputError("Template graph is disconnected; geodesics are undefined")
    errors = distances[pred, gt]
    return errors / diameter if diameter > 0 else errors


def error_curve(errors, thresholds=None):
    """Empirical CDF of ``errors`` at ``thresholds`` with its trapezoid area."""
    t = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=float).reshape(-1)
    if len(t) == 0 or np.any(np.diff(t) < 0):
        raise InvalidInputError("Thresholds must be a non-empty ascending sequence")
    e = np.asarray(errors, dtype=float).reshape(-1)
    if len(e) == 0:
        raise InvalidInputError("No errors to summarize")
    fractions = np.mean(e[None, :] <= t[:, None], axis=1)
    auc = float(np.sum(0.5 * (fractions[1:] + fractions[:-1]) * np.diff(t)))
    return ErrorCurve(thresholds=t, fractions=fractions, auc=auc)


def geodesic_error_curve(pred_corr, gt_corr, graph, thresholds=None, distances=None):
    """
    Correspondence accuracy curve under the normalized template geodesic.

    :param array-like pred_corr: predicted template index per target point
    :param array-like gt_corr: true template index per target point
    :param KnnGraph graph: connected template graph
    :param array-like thresholds: ascending thresholds (101 samples of
        [0, 0.5] by default)
    :param numpy.ndarray distances: precomputed all-pairs distances of ``graph``
    :return ErrorCurve: the curve
    """
    return error_curve(geodesic_errors(pred_corr, gt_corr, graph, distances), thresholds)


def _paired(without, with_):
    a = np.asarray(without, dtype=float).reshape(-1)
    b = np.asarray(with_, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise InvalidInputError(f"Error arrays differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise InvalidInputError("Error arrays are empty")
    return a, b


def improvement_rate(errors_without, errors_with):
    """Fraction of shapes where the second method is strictly better."""
    a, b = _paired(errors_without, errors_with)
    return float(np.mean(b < a))


def mean_relative_improvement(errors_without, errors_with):
    """Mean of (without - with) / without over shapes; shapes with zero baseline count as 0."""
    a, b = _paired(errors_without, errors_with)
    safe = np.where(a > 0, a, 1.0)
    return float(np.mean(np.where(a > 0, (a - b) / safe, 0.0)))


@dataclass(frozen=True)
class MethodSpec:
    """
    One row of the method matrix: backbone inference mode (or the rigid ICP
    baseline), whether NICP runs, and the last pipeline stage applied.
    """

    name: str
    mode: str = "lvd"
    nicp: bool = False
    stage: str = "convergence"
    chamfer_mode: str = "bidirectional"

    def __post_init__(self):
        if self.mode not in METHOD_MODES:
            raise InvalidInputError(f"Method '{self.name}': unknown mode '{self.mode}'")
        if self.stage not in METHOD_STAGES:
            raise InvalidInputError(f"Method '{self.name}': unknown stage '{self.stage}'")

    @classmethod
    def from_mapping(cls, d):
        return cls(**{k: v for k, v in dict(d).items() if k in cls.__dataclass_fields__})

    @property
    def uses_field(self):
        return self.mode != "rigid_icp"

    def refine_config(self, base):
        depth = METHOD_STAGES.index(self.stage)
        return replace(
            base,
            mode=self.mode,
            chamfer_mode=self.chamfer_mode,
            fit=depth >= 1,
            chamfer=depth >= 2,
            displacements=depth >= 3,
        )

    def nicp_config(self, base):
        return replace(base, enabled=self.nicp)

    def key(self):
        return (self.mode, self.stage, self.chamfer_mode)


@dataclass
class BenchmarkReport:
    """
    ``cells`` holds one record per field x method x shape; ``summary`` one per
    field x method. ``improvements`` compares method pairs differing only in
    NICP; ``ablation`` maps method name to mean error per field when several
    fields were evaluated.
    """

    cells: List[dict]
    summary: List[dict]
    improvements: List[dict]
    curves: Dict[str, ErrorCurve]
    thresholds: np.ndarray
    ablation: Optional[Dict[str, Dict[str, float]]] = None
    zero_fractions: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings=False):
        cells = []
        for c in self.cells:
            c = dict(c)
            if not include_timings:
                c.pop("timings", None)
            cells.append(c)
        return {
            "cells": cells,
            "summary": self.summary,
            "improvements": self.improvements,
            "ablation": self.ablation,
            "curves": {k: v.to_dict() for k, v in self.curves.items()},
            "thresholds": [float(t) for t in self.thresholds],
        }


def _field_label(field):
    return f"l={field.n_heads}"


def _row_name(method, label, several):
    if not method.uses_field or not several:
        return method.name
    return f"{method.name}[{label}]"


def _rigid_baseline(template, pair):
    target, record = normalize_cloud(pair.target)
    rest, _ = normalize_cloud(template.rest_vertices)
    transform, history = rigid_icp(rest, target)
    return denormalize_cloud(transform.apply(rest), record), {"rigid_icp": {"rmse": history}}


def run_benchmark(
    fields,
    test_set,
    methods,
    config=None,
    seed=0,
    jobs=1,
    thresholds=None,
):
    """
    Register every test shape with every method and aggregate the metrics.

    :param NeuralDeformationField | Mapping[str, NeuralDeformationField] fields:
        one trained field, or several keyed by label for the segments ablation
    :param Sequence[GroundTruthPair] test_set: shapes with ground truth
    :param Iterable[MethodSpec | Mapping] methods: method matrix
    :param Mapping config: pipeline settings ("nicp" and "refinement" sections)
    :param int seed: base seed; every method sees the same per-shape seed
    :param int jobs: worker threads for the cells
    :param array-like thresholds: geodesic curve thresholds
    :return BenchmarkReport: the report
    """
    methods = [m if isinstance(m, MethodSpec) else MethodSpec.from_mapping(m) for m in methods]
    if not methods:
        raise InvalidInputError("Method matrix is empty")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise InvalidInputError(f"Method names must be unique, got {names}")
    if not isinstance(fields, Mapping):
        fields = {_field_label(fields): fields}
    if not fields:
        raise InvalidInputError("No field to evaluate")
    pairs = list(test_set)
    if not pairs:
        raise InvalidInputError("Test set is empty")
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=float)
    config = config or {}
    base_nicp = NicpConfig.from_mapping(config.get("nicp", {}))
    base_refine = RefineConfig.from_mapping(config.get("refinement", {}))
    several = len(fields) > 1
    template = next(iter(fields.values())).template
    for label, f in fields.items():
        if f.template.digest() != template.digest():
            raise InvalidInputError(f"Field '{label}' uses a different template")
    distances = graph_distance_matrix(template.graph)
    if not np.all(np.isfinite(distances)):
        raise InvalidInputError("Template graph is disconnected; geodesics are undefined")
    seeds = shape_seeds(seed, len(pairs))

    jobs_list = []
    for method in methods:
        labels = list(fields) if method.uses_field else ["-"]
        for label in labels:
            for i in range(len(pairs)):
                jobs_list.append((method, label, i))

    def run_cell(job):
        method, label, i = job
        pair = pairs[i]
        clock = time.perf_counter()
        if method.uses_field:
            result = register(
                fields[label],
                pair.target,
                seed=seeds[i],
                nicp_config=method.nicp_config(base_nicp),
                refine_config=method.refine_config(base_refine),
            )
            vertices, timings = result.vertices, dict(result.timings)
        else:
            vertices, _ = _rigid_baseline(template, pair)
            timings = {}
        timings["total"] = time.perf_counter() - clock
        mean_err, _ = v2v_error(vertices, pair.gt_vertices)
        pred_corr, _ = nearest_indices(pair.target, vertices)
        errors = geodesic_errors(pred_corr, pair.gt_target_corr, template.graph, distances)
        curve = error_curve(errors, thresholds)
        return {
            "method": _row_name(method, label, several),
            "base_method": method.name,
            "field": label,
            "shape": pair.name or f"shape_{i:04d}",
            "v2v": mean_err,
            "auc": curve.auc,
            "zero_fraction": float(np.mean(errors == 0)),
            "timings": timings,
        }, errors

    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as pool:
        outputs = list(pool.map(run_cell, jobs_list))
    _LOGGER.info(f"Benchmark: {len(outputs)} cells over {len(pairs)} shapes")

    cells = [c for c, _ in outputs]
    pooled = {}
    for c, errors in outputs:
        pooled.setdefault(c["method"], []).append(errors)
    curves = {k: error_curve(np.concatenate(v), thresholds) for k, v in pooled.items()}

    summary = []
    per_row = {}
    for c in cells:
        per_row.setdefault(c["method"], []).append(c)
    for row, rows in per_row.items():
        v2v = np.array([c["v2v"] for c in rows])
        summary.append(
            {
                "method": row,
                "field": rows[0]["field"],
                "shapes": len(rows),
                "mean_v2v": float(v2v.mean()),
                "median_v2v": float(np.median(v2v)),
                "mean_auc": float(np.mean([c["auc"] for c in rows])),
                "zero_fraction": float(np.mean(np.concatenate(pooled[row]) == 0)),
            }
        )

    improvements = []
    by_name = {m.name: m for m in methods}
    for without in methods:
        if without.nicp or not without.uses_field:
            continue
        for with_ in methods:
            if with_.nicp and with_.key() == without.key():
                for label in fields:
                    a = [c["v2v"] for c in per_row[_row_name(without, label, several)]]
                    b = [c["v2v"] for c in per_row[_row_name(with_, label, several)]]
                    improvements.append(
                        {
                            "without": _row_name(without, label, several),
                            "with": _row_name(with_, label, several),
                            "improvement_rate": improvement_rate(a, b),
                            "mean_relative_improvement": mean_relative_improvement(a, b),
                        }
                    )

    ablation = None
    if several:
        ablation = {}
        for name, method in by_name.items():
            if not method.uses_field:
                continue
            ablation[name] = {
                label: float(np.mean([c["v2v"] for c in per_row[_row_name(method, label, True)]]))
                for label in fields
            }
    return BenchmarkReport(
        cells=cells,
        summary=summary,
        improvements=improvements,
        curves=curves,
        thresholds=thresholds,
        ablation=ablation,
        zero_fractions={s["method"]: s["zero_fraction"] for s in summary},
    )


def _safe_name(name):
    return re.sub(r"[^A-Za-z0-9+._=-]", "_", name)


def write_report(out_dir, report, include_timings=False):
    """
    Write report.json, summary.csv (one row per shape x method) and
    curves/<method>.csv (threshold, fraction).

    :param str out_dir: destination directory, created if missing
    :param BenchmarkReport report: report to write
    :param bool include_timings: keep per-cell timings in report.json
    :return str: absolute path of the directory
    """
    curves_dir = os.path.join(out_dir, "curves")
    os.makedirs(curves_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", newline="\n") as f:
        json.dump(report.to_dict(include_timings), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "field", "shape", "v2v", "auc", "zero_fraction"])
        for c in report.cells:
            writer.writerow(
                [c["method"], c["field"], c["shape"], repr(c["v2v"]), repr(c["auc"]), repr(c["zero_fraction"])]
            )
    for name, curve in report.curves.items():
        with open(os.path.join(curves_dir, f"{_safe_name(name)}.csv"), "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["threshold", "fraction"])
            for t, frac in zip(curve.thresholds, curve.fractions):
                writer.writerow([repr(float(t)), repr(float(frac))])
    _LOGGER.info(f"Wrote benchmark report to '{out_dir}'")
    return os.path.abspath(out_dir)
