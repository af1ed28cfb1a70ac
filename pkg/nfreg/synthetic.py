"""
Synthetic training and test data: randomly posed and scaled template
instances, target clouds resampled on the posed capsule surfaces, corruption
with noise, missing parts and clutter, and the on-disk dataset layout.
"""

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .config import locked_file
from .exceptions import InvalidInputError
from .geometry import (
    apply_normalization,
    as_cloud,
    nearest_indices,
    normalize_cloud,
    read_xyz,
    write_xyz,
)
from .skeleton import (
    PoseShapeParams,
    SkeletonSpec,
    build_template,
    capsule_surface_samples,
    pose_points,
    pose_template,
    skinning_weights,
)

_LOGGER = logging.getLogger(__name__)

DATASET_VERSION = 1
MANIFEST_NAME = "manifest.json"
SHAPE_FILES = ("target.xyz", "gt_vertices.xyz", "params.json", "corr.csv")

__all__ = [
    "CorruptionSpec",
    "GeneratorConfig",
    "GroundTruthPair",
    "ShapeDataset",
    "sample_pose_params",
    "sample_training_shape",
    "corrupt_cloud",
    "generate_pairs",
    "write_dataset",
    "read_dataset",
    "shape_seeds",
]


@dataclass
class CorruptionSpec:
    """
    Degradations applied to a target cloud, in this order: gaussian jitter,
    removal of a contiguous region, clutter points in a ball next to the
    shape, resampling to a fixed count (0 keeps the count).
    """

    jitter_sigma: float = 0.0
    crop_fraction: float = 0.0
    clutter_points: int = 0
    clutter_radius: float = 0.1
    resample: int = 0

    def __post_init__(self):
        if self.jitter_sigma < 0 or self.clutter_radius < 0:
            raise InvalidInputError("Corruption sigma and radius must be non-negative")
        if not 0.0 <= self.crop_fraction < 1.0:
            raise InvalidInputError(f"crop_fraction must lie in [0, 1), got {self.crop_fraction}")
        if self.clutter_points < 0 or self.resample < 0:
            raise InvalidInputError("Clutter and resample counts must be non-negative")

    @property
    def is_identity(self):
        return (
            self.jitter_sigma == 0
            and self.crop_fraction == 0
            and self.clutter_points == 0
            and self.resample == 0
        )


@dataclass
class GeneratorConfig:
    m: int = 200
    template_seed: int = 0
    knn_k: int = 8
    shapes: int = 16
    n_points: int = 4096
    pose_fraction: float = 1.0
    scale_range: Tuple[float, float] = (0.8, 1.25)
    random_yaw: bool = True
    skeleton: Optional[dict] = None
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)

    def __post_init__(self):
        if isinstance(self.corruption, dict):
            self.corruption = CorruptionSpec(**self.corruption)
        self.scale_range = tuple(float(s) for s in self.scale_range)
        lo, hi = self.scale_range
        if not 0.5 <= lo <= hi <= 2.0:
            raise InvalidInputError(f"scale_range must satisfy 0.5 <= lo <= hi <= 2, got {self.scale_range}")
        if not 0.0 <= self.pose_fraction <= 1.0:
            raise InvalidInputError(f"pose_fraction must lie in [0, 1], got {self.pose_fraction}")
        if self.n_points < 1 or self.shapes < 1:
            raise InvalidInputError("n_points and shapes must be positive")

    @classmethod
    def from_mapping(cls, d):
        known = {k: v for k, v in dict(d).items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    def skeleton_spec(self):
        return None if self.skeleton is None else SkeletonSpec.from_dict(self.skeleton)

    def build_template(self):
        return build_template(self.skeleton_spec(), m=self.m, seed=self.template_seed, knn_k=self.knn_k)


@dataclass
class GroundTruthPair:
    """
    A target cloud with the template vertices that register it.

    ``gt_target_corr`` holds, per target point, the index of the closest
    ground-truth vertex.
    """

    target: np.ndarray
    gt_vertices: np.ndarray
    gt_params: PoseShapeParams
    gt_target_corr: np.ndarray
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        self.target = as_cloud(self.target, "target")
        self.gt_vertices = as_cloud(self.gt_vertices, "gt_vertices")
        self.gt_target_corr = np.asarray(self.gt_target_corr, dtype=np.int64).reshape(-1)
        if len(self.gt_target_corr) != len(self.target):
            raise InvalidInputError(
                f"{len(self.gt_target_corr)} correspondences for {len(self.target)} target points"
            )
        m = len(self.gt_vertices)
        if len(self.gt_target_corr) and (self.gt_target_corr.min() < 0 or self.gt_target_corr.max() >= m):
            raise InvalidInputError(f"Correspondence index out of range [0, {m})")


def shape_seeds(seed, count):
    """Independent per-shape seeds derived from one base seed."""
    state = np.random.SeedSequence(int(seed)).generate_state(int(count), dtype=np.uint32)
    return [int(s) for s in state]


def sample_pose_params(template, rng, config):
    """
    Uniform draw within the bone limits (shrunk by ``pose_fraction``) and the
    configured scale range, with an optional random heading about +Y.
    """
    n_bones = template.n_bones
    limits = template.skeleton.limits * config.pose_fraction
    joints = rng.uniform(-1.0, 1.0, size=(n_bones, 3)) * limits
    lo, hi = config.scale_range
    length_scales = rng.uniform(lo, hi, size=n_bones)
    radius_scales = rng.uniform(lo, hi, size=n_bones)
    yaw = rng.uniform(0.0, 2.0 * np.pi) if config.random_yaw else 0.0
    return PoseShapeParams(
        joint_rotations=joints,
        global_rotation=np.array([0.0, yaw, 0.0]),
        translation=np.zeros(3),
        length_scales=length_scales,
        radius_scales=radius_scales,
    )


def _to_normalized_frame(params, record):
    out = params.copy()
    out.global_scale = params.global_scale / record.scale
    out.translation = (params.translation - record.centroid) / record.scale
    return out


def sample_training_shape(template, seed, config=None):
    """
    Draw one ground-truth pair.

    :param TemplateModel template: template to pose
    :param int seed: seed for the pose draw and the surface resampling
    :param GeneratorConfig config: generator settings
    :return GroundTruthPair: target and vertices normalized jointly, with
        ``gt_params`` expressed in the normalized frame
    """
    config = GeneratorConfig() if config is None else config
    rng = np.random.default_rng(seed)
    params = sample_pose_params(template, rng, config)
    gt_vertices = pose_template(template, params)
    surface, _ = capsule_surface_samples(template.skeleton, config.n_points, rng)
    weights = skinning_weights(template.skeleton, surface)
    target = pose_points(template.skeleton, surface, weights, params.to_store()).value
    target, record = normalize_cloud(target)
    gt_vertices = apply_normalization(gt_vertices, record)
    corr, _ = nearest_indices(target, gt_vertices)
    return GroundTruthPair(
        target=target,
        gt_vertices=gt_vertices,
        gt_params=_to_normalized_frame(params, record),
        gt_target_corr=corr,
        seed=int(seed),
    )


def _crop(cloud, fraction, rng):
    n = len(cloud)
    remove = int(math.floor(fraction * n))
    if remove == 0:
        return cloud
    anchor = cloud[rng.integers(n)]
    antipode = 2.0 * cloud.mean(axis=0) - anchor
    order = np.argsort(np.linalg.norm(cloud - antipode, axis=1), kind="stable")
    keep = np.sort(order[remove:])
    return cloud[keep]


def _clutter(cloud, count, radius, rng):
    centroid = cloud.mean(axis=0)
    extent = float(np.linalg.norm(cloud.max(axis=0) - cloud.min(axis=0)))
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    center = centroid + direction * (0.5 * extent + radius)
    u = rng.standard_normal((count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / 3.0)
    return np.concatenate([cloud, center + u * r[:, None]])


def _resample(cloud, count, rng):
    n = len(cloud)
    if count == n:
        return cloud
    if count < n:
        idx = np.sort(rng.choice(n, size=count, replace=False))
    else:
        idx = np.concatenate([np.arange(n), np.sort(rng.integers(0, n, size=count - n))])
    return cloud[idx]


def corrupt_cloud(cloud, spec, seed):
    """
    Degrade a cloud.

    The crop removes the ``floor(fraction * n)`` points closest to the
    antipode (through the centroid) of a random point, leaving
    ``ceil((1 - fraction) * n)``.

    :param array-like cloud: input points
    :param CorruptionSpec | Mapping spec: degradations to apply
    :param int seed: randomness seed
    :return numpy.ndarray: corrupted copy
    :raise InvalidInputError: if the crop fraction is not in [0, 1)
    """
    cloud = as_cloud(cloud)
    spec = CorruptionSpec(**spec) if isinstance(spec, dict) else spec
    out = cloud.copy()
    if spec.is_identity:
        return out
    rng = np.random.default_rng(seed)
    if spec.jitter_sigma > 0:
        out = out + rng.normal(0.0, spec.jitter_sigma, size=out.shape)
    if spec.crop_fraction > 0:
        out = _crop(out, spec.crop_fraction, rng)
    if spec.clutter_points > 0:
        out = _clutter(out, spec.clutter_points, spec.clutter_radius, rng)
    if spec.resample > 0:
        out = _resample(out, spec.resample, rng)
    _LOGGER.debug(f"Corrupted cloud: {len(cloud)} -> {len(out)} points")
    return out


def _corrupted_pair(pair, spec):
    if spec.is_identity:
        return pair
    # the corruption stream must differ from the one that drew the shape
    target = corrupt_cloud(pair.target, spec, seed=[pair.seed, 1])
    # renormalize so the corrupted target is again unit-diagonal
    target, record = normalize_cloud(target)
    gt_vertices = apply_normalization(pair.gt_vertices, record)
    corr, _ = nearest_indices(target, gt_vertices)
    return GroundTruthPair(
        target=target,
        gt_vertices=gt_vertices,
        gt_params=_to_normalized_frame(pair.gt_params, record),
        gt_target_corr=corr,
        seed=pair.seed,
        name=pair.name,
    )


def generate_pairs(template, config, seed, jobs=1):
    """
    Generate ``config.shapes`` corrupted pairs, in parallel when ``jobs`` > 1.

    :return list[GroundTruthPair]: pairs named shape_0000, shape_0001, ...
    """
    seeds = shape_seeds(seed, config.shapes)

    def one(i):
        pair = sample_training_shape(template, seeds[i], config)
        pair.name = f"shape_{i:04d}"
        return _corrupted_pair(pair, config.corruption)

    with ThreadPoolExecutor(max_workers=max(1, int(jobs))) as pool:
        pairs = list(pool.map(one, range(config.shapes)))
    _LOGGER.info(f"Generated {len(pairs)} shapes (seed {seed})")
    return pairs


def _write_json(path, data):
    with open(path, "w", newline="\n") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_corr(path, corr):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        for i in corr:
            writer.writerow([int(i)])


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except ValueError as e:
        raise InvalidInputError(f"Malformed JSON in '{path}': {e}")


def _read_corr(path):
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            rows = [r for r in csv.reader(f) if r]
        return np.array([int(r[0]) for r in rows], dtype=np.int64)
    except ValueError:
        raise InvalidInputError(f"{path}: correspondence indices must be integers")


def write_dataset(out_dir, pairs, config, template):
    """
    Write pairs in the dataset layout: ``manifest.json`` plus one directory
    per shape holding target.xyz, gt_vertices.xyz, params.json and corr.csv.

    :param str out_dir: destination directory, created if missing
    :param list[GroundTruthPair] pairs: shapes to write
    :param GeneratorConfig config: generator settings recorded in the manifest
    :param TemplateModel template: template whose recipe is recorded
    :return str: absolute path of the manifest
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        name = pair.name or f"shape_{i:04d}"
        shape_dir = os.path.join(out_dir, name)
        os.makedirs(shape_dir, exist_ok=True)
        write_xyz(os.path.join(shape_dir, "target.xyz"), pair.target)
        write_xyz(os.path.join(shape_dir, "gt_vertices.xyz"), pair.gt_vertices)
        _write_json(os.path.join(shape_dir, "params.json"), pair.gt_params.to_dict())
        _write_corr(os.path.join(shape_dir, "corr.csv"), pair.gt_target_corr)
        entries.append({"name": name, "seed": int(pair.seed)})
    manifest = {
        "version": DATASET_VERSION,
        "generator": config.to_dict(),
        "template": template.recipe(),
        "template_sha256": template.digest(),
        "shapes": entries,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with locked_file(path):
        _write_json(path, manifest)
    _LOGGER.info(f"Wrote {len(entries)} shapes to '{out_dir}'")
    return os.path.abspath(path)


class ShapeDataset(object):
    """
    Read-only view of a dataset directory. Shapes load from disk on access.
    """

    def __init__(self, root, manifest):
        self.root = root
        self.manifest = manifest
        self.entries = manifest["shapes"]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        entry = self.entries[i]
        shape_dir = os.path.join(self.root, entry["name"])
        for fname in SHAPE_FILES:
            if not os.path.isfile(os.path.join(shape_dir, fname)):
                raise InvalidInputError(f"Dataset shape '{entry['name']}' is missing {fname}")
        params_path = os.path.join(shape_dir, "params.json")
        raw = _read_json(params_path)
        try:
            params = PoseShapeParams.from_dict(raw)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidInputError(f"Incomplete pose parameters in '{params_path}': {e}")
        return GroundTruthPair(
            target=read_xyz(os.path.join(shape_dir, "target.xyz")),
            gt_vertices=read_xyz(os.path.join(shape_dir, "gt_vertices.xyz")),
            gt_params=params,
            gt_target_corr=_read_corr(os.path.join(shape_dir, "corr.csv")),
            seed=int(entry.get("seed", 0)),
            name=entry["name"],
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def template_recipe(self):
        return self.manifest["template"]

    def build_template(self):
        """Rebuild the template from the recorded recipe and check its digest."""
        recipe = self.template_recipe()
        try:
            skeleton = SkeletonSpec.from_dict(recipe["skeleton"])
            m, seed, knn_k = recipe["m"], recipe["seed"], recipe["knn_k"]
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"Dataset template recipe is incomplete: {e}")
        template = build_template(skeleton, m=m, seed=seed, knn_k=knn_k)
        expected = self.manifest.get("template_sha256")
        if expected is not None and template.digest() != expected:
            raise InvalidInputError("Dataset template digest does not match its recipe")
        return template


def read_dataset(root):
    """
    Open a dataset directory.

    :param str root: directory holding manifest.json
    :return ShapeDataset: lazily loading dataset
    :raise InvalidInputError: if the manifest is missing or malformed
    """
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise InvalidInputError(f"No dataset manifest at '{path}'")
    manifest = _read_json(path)
    if not isinstance(manifest, dict) or "shapes" not in manifest or "template" not in manifest:
        raise InvalidInputError(f"Dataset manifest '{path}' lacks 'shapes' or 'template'")
    return ShapeDataset(os.path.abspath(root), manifest)
