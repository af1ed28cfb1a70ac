"""
Procedural articulated template: a capsule skeleton, surface sampling,
skinning weights and differentiable forward kinematics with linear blend
skinning.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .exceptions import InvalidInputError
from .geometry import RigidTransform, build_knn_graph, graph_laplacian, is_connected

_LOGGER = logging.getLogger(__name__)

DEFAULT_TEMPLATE_SIZE = 200
SCALE_BOUNDS = (0.5, 2.0)
MIN_VERTICES_PER_BONE = 4
# skinning softness relative to the mean capsule radius
SKINNING_SIGMA_FACTOR = 0.5
_LIMB_LIMIT = 1.2
_SPINE_LIMIT = 0.4
_MAX_SAMPLING_ROUNDS = 200

__all__ = [
    "BoneSpec",
    "SkeletonSpec",
    "TemplateModel",
    "PoseShapeParams",
    "default_skeleton",
    "build_template",
    "rest_heads",
    "capsule_surface_samples",
    "skinning_weights",
    "pose_points",
    "pose_template",
    "pose_template_tensor",
    "compose_rigid",
]


@dataclass(frozen=True)
class BoneSpec:
    """
    One capsule bone.

    ``offset`` places the bone's head relative to its parent's head (absolute
    for the root) and is stretched by the parent's length scale; ``tail`` is
    the capsule's segment vector from the head.
    """

    name: str
    parent: Optional[int]
    offset: Tuple[float, float, float]
    tail: Tuple[float, float, float]
    radius: float
    limit: Tuple[float, float, float]

    def to_dict(self):
        return {
            "name": self.name,
            "parent": self.parent,
            "offset": [float(v) for v in self.offset],
            "tail": [float(v) for v in self.tail],
            "radius": float(self.radius),
            "limit": [float(v) for v in self.limit],
        }

    @classmethod
    def from_dict(cls, d):
        limit = d["limit"]
        if np.isscalar(limit):
            limit = [limit] * 3
        return cls(
            name=str(d.get("name", "")),
            parent=None if d.get("parent") is None else int(d["parent"]),
            offset=tuple(float(v) for v in d["offset"]),
            tail=tuple(float(v) for v in d["tail"]),
            radius=float(d["radius"]),
            limit=tuple(float(v) for v in limit),
        )


@dataclass(frozen=True)
class SkeletonSpec:
    bones: Tuple[BoneSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "bones", tuple(self.bones))
        self.validate()

    def validate(self):
        if not self.bones:
            raise InvalidInputError("Skeleton has no bones")
        roots = [i for i, b in enumerate(self.bones) if b.parent is None]
        if roots != [0]:
            raise InvalidInputError(f"Skeleton needs exactly one root at index 0, got {roots}")
        for i, b in enumerate(self.bones[1:], start=1):
            if not 0 <= b.parent < i:
                raise InvalidInputError(
                    f"Bone {i} ('{b.name}') has parent {b.parent}; parents must precede children"
                )
        for i, b in enumerate(self.bones):
            if not b.radius > 0:
                raise InvalidInputError(f"Bone {i} radius must be positive")
            if not np.linalg.norm(b.tail) > 0:
                raise InvalidInputError(f"Bone {i} has a zero-length tail")
            if min(b.limit) < 0:
                raise InvalidInputError(f"Bone {i} rotation limits must be non-negative")

    @property
    def n_bones(self):
        return len(self.bones)

    @property
    def limits(self):
        return np.array([b.limit for b in self.bones], dtype=float)

    @property
    def radii(self):
        return np.array([b.radius for b in self.bones], dtype=float)

    def to_dict(self):
        return {"bones": [b.to_dict() for b in self.bones]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(BoneSpec.from_dict(b) for b in d["bones"]))


def default_skeleton():
    """
    Twelve-bone humanoid: pelvis, spine, chest, head, two two-bone arms and
    two two-bone legs. Y is up; units are roughly meters.
    """
    limb = (_LIMB_LIMIT,) * 3
    spine = (_SPINE_LIMIT,) * 3
    bones = [
        BoneSpec("pelvis", None, (0.0, 0.95, 0.0), (0.0, 0.12, 0.0), 0.12, limb),
        BoneSpec("spine", 0, (0.0, 0.12, 0.0), (0.0, 0.22, 0.0), 0.11, spine),
        BoneSpec("chest", 1, (0.0, 0.22, 0.0), (0.0, 0.20, 0.0), 0.13, spine),
        BoneSpec("head", 2, (0.0, 0.24, 0.0), (0.0, 0.20, 0.0), 0.09, limb),
        BoneSpec("l_shoulder", 2, (0.18, 0.17, 0.0), (0.28, 0.0, 0.0), 0.05, limb),
        BoneSpec("l_elbow", 4, (0.28, 0.0, 0.0), (0.26, 0.0, 0.0), 0.04, limb),
        BoneSpec("r_shoulder", 2, (-0.18, 0.17, 0.0), (-0.28, 0.0, 0.0), 0.05, limb),
        BoneSpec("r_elbow", 6, (-0.28, 0.0, 0.0), (-0.26, 0.0, 0.0), 0.04, limb),
        BoneSpec("l_hip", 0, (0.10, -0.02, 0.0), (0.0, -0.42, 0.0), 0.07, limb),
        BoneSpec("l_knee", 8, (0.0, -0.42, 0.0), (0.0, -0.42, 0.0), 0.055, limb),
        BoneSpec("r_hip", 0, (-0.10, -0.02, 0.0), (0.0, -0.42, 0.0), 0.07, limb),
        BoneSpec("r_knee", 10, (0.0, -0.42, 0.0), (0.0, -0.42, 0.0), 0.055, limb),
    ]
    return SkeletonSpec(tuple(bones))


def rest_heads(skeleton):
    """Rest-pose head position of every bone, (J, 3)."""
    heads = np.zeros((skeleton.n_bones, 3))
    for i, b in enumerate(skeleton.bones):
        offset = np.asarray(b.offset, dtype=float)
        heads[i] = offset if b.parent is None else heads[b.parent] + offset
    return heads


def _segments(skeleton):
    heads = rest_heads(skeleton)
    tails = heads + np.array([b.tail for b in skeleton.bones], dtype=float)
    return heads, tails


def _segment_distances(points, heads, tails):
    """Distance from every point to every bone segment, (n, J)."""
    d = tails - heads
    rel = points[:, None, :] - heads[None, :, :]
    t = np.clip(np.einsum("njk,jk->nj", rel, d) / np.einsum("jk,jk->j", d, d), 0.0, 1.0)
    closest = heads[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


def _orthonormal_frame(direction):
    d = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return d, e1, np.cross(d, e1)


def _sample_capsule(rng, head, tail, radius, count):
    d, e1, e2 = _orthonormal_frame(tail - head)
    length = np.linalg.norm(tail - head)
    cyl_area = 2.0 * np.pi * radius * length
    sph_area = 4.0 * np.pi * radius**2
    on_cyl = rng.random(count) < cyl_area / (cyl_area + sph_area)
    phi = rng.random(count) * 2.0 * np.pi
    ring = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    axial = rng.random(count)[:, None] * length
    cyl = head + axial * d + radius * ring
    u = rng.standard_normal((count, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    cap_center = np.where((u @ d)[:, None] >= 0, tail, head)
    sph = cap_center + radius * u
    return np.where(on_cyl[:, None], cyl, sph)


def _allocate(areas, total, minimum):
    """Largest-remainder split of ``total`` proportional to ``areas`` on top of ``minimum`` each."""
    spare = total - minimum * len(areas)
    share = spare * areas / areas.sum()
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: spare - counts.sum()]] += 1
    return counts + minimum


def capsule_surface_samples(skeleton, count, rng, minimum=0):
    """
    Points on the boundary of the union of rest-pose capsules, stratified per
    bone proportionally to capsule area. Samples buried inside another capsule
    are rejected and redrawn.

    :param SkeletonSpec skeleton: capsule layout
    :param int count: number of points
    :param numpy.random.Generator rng: randomness source
    :param int minimum: guaranteed samples per bone
    :return (numpy.ndarray, numpy.ndarray): (count, 3) points and the bone each was drawn from
    """
    heads, tails = _segments(skeleton)
    radii = skeleton.radii
    lengths = np.linalg.norm(tails - heads, axis=1)
    areas = 2.0 * np.pi * radii * lengths + 4.0 * np.pi * radii**2
    counts = _allocate(areas, count, minimum)
    points, owners = [], []
    for b, need in enumerate(counts):
        got = np.zeros((0, 3))
        for _ in range(_MAX_SAMPLING_ROUNDS):
            if len(got) >= need:
                break
            cand = _sample_capsule(rng, heads[b], tails[b], radii[b], 2 * need + 8)
            dist = _segment_distances(cand, heads, tails)
            dist[:, b] = np.inf
            buried = np.any(dist < radii[None, :] * (1.0 - 1e-6), axis=1)
            got = np.concatenate([got, cand[~buried]])
        if len(got) < need:
            _LOGGER.warning(f"Bone {b} is mostly buried; keeping interior samples")
            got = np.concatenate([got, _sample_capsule(rng, heads[b], tails[b], radii[b], need)])
        points.append(got[:need])
        owners.append(np.full(need, b))
    return np.concatenate(points), np.concatenate(owners)


def skinning_weights(skeleton, points, sigma=None):
    """
    Gaussian falloff of the distance to each bone segment, kept for the two
    nearest bones and normalized.

    :param SkeletonSpec skeleton: capsule layout
    :param numpy.ndarray points: (n, 3) rest-pose points
    :param float sigma: falloff width; defaults to half the mean capsule radius
    :return numpy.ndarray: (n, J) weights, rows sum to 1
    """
    heads, tails = _segments(skeleton)
    if sigma is None:
        sigma = SKINNING_SIGMA_FACTOR * float(skeleton.radii.mean())
    dist = _segment_distances(np.asarray(points, dtype=float), heads, tails)
    n, n_bones = dist.shape
    weights = np.zeros((n, n_bones))
    keep = min(2, n_bones)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :keep]
    logits = -np.take_along_axis(dist, nearest, axis=1) ** 2 / (2.0 * sigma**2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    np.put_along_axis(weights, nearest, w / w.sum(axis=1, keepdims=True), axis=1)
    return weights


@dataclass
class TemplateModel:
    """
    Ordered rest vertices with skinning weights, the skeleton that drives
    them, optional segment labels and the rest kNN graph.
    """

    rest_vertices: np.ndarray
    weights: np.ndarray
    skeleton: SkeletonSpec
    graph: object
    labels: Optional[np.ndarray] = None
    seed: int = 0
    knn_k: int = 8
    _laplacian: Optional[np.ndarray] = field(default=None, repr=False)
    _frames: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        m, n_bones = self.weights.shape
        if self.rest_vertices.shape != (m, 3):
            raise InvalidInputError("Rest vertices and weights disagree on vertex count")
        if n_bones != self.skeleton.n_bones:
            raise InvalidInputError("Skinning weights and skeleton disagree on bone count")
        if np.any(self.weights < 0) or np.abs(self.weights.sum(axis=1) - 1).max() > 1e-9:
            raise InvalidInputError("Skinning weight rows must be non-negative and sum to 1")

    @property
    def n_vertices(self):
        return self.rest_vertices.shape[0]

    @property
    def n_bones(self):
        return self.skeleton.n_bones

    @property
    def laplacian(self):
        if self._laplacian is None:
            self._laplacian = graph_laplacian(self.graph)
        return self._laplacian

    def recipe(self):
        return {
            "skeleton": self.skeleton.to_dict(),
            "m": int(self.n_vertices),
            "seed": int(self.seed),
            "knn_k": int(self.knn_k),
        }

    def digest(self):
        """SHA-256 over rest vertices and skinning weights."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.rest_vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
        return h.hexdigest()


def build_template(spec=None, m=DEFAULT_TEMPLATE_SIZE, seed=0, knn_k=8):
    """
    Sample a template on the rest-pose capsule surfaces.

    :param SkeletonSpec spec: skeleton (the default humanoid when None)
    :param int m: vertex count, at least 4 per bone
    :param int seed: sampling seed
    :param int knn_k: neighbors per vertex in the rest graph
    :return TemplateModel: deterministic for identical arguments
    """
    spec = default_skeleton() if spec is None else spec
    if not isinstance(spec, SkeletonSpec):
        raise InvalidInputError(f"Expected a SkeletonSpec, got {type(spec).__name__}")
    if m < MIN_VERTICES_PER_BONE * spec.n_bones:
        raise InvalidInputError(
            f"Template needs at least {MIN_VERTICES_PER_BONE * spec.n_bones} vertices "
            f"for {spec.n_bones} bones, got {m}"
        )
    rng = np.random.default_rng(seed)
    verts, _ = capsule_surface_samples(spec, m, rng, minimum=MIN_VERTICES_PER_BONE)
    graph = build_knn_graph(verts, k=min(knn_k, m - 1))
    if not is_connected(graph):
        _LOGGER.warning(f"Template kNN graph (k={knn_k}) is disconnected")
    _LOGGER.debug(f"Built template: {m} vertices, {spec.n_bones} bones, seed {seed}")
    return TemplateModel(
        rest_vertices=verts,
        weights=skinning_weights(spec, verts),
        skeleton=spec,
        graph=graph,
        seed=seed,
        knn_k=knn_k,
    )


@dataclass
class PoseShapeParams:
    """
    Articulation and shape of the template: per-bone axis-angle rotations and
    length/radius scales, then a global rotation, uniform scale and translation.
    """

    joint_rotations: np.ndarray
    global_rotation: np.ndarray
    translation: np.ndarray
    length_scales: np.ndarray
    radius_scales: np.ndarray
    global_scale: float = 1.0

    KEYS = (
        "joint_rotations",
        "global_rotation",
        "translation",
        "length_scales",
        "radius_scales",
        "global_scale",
    )

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=float).reshape(-1, 3)
        self.global_rotation = np.asarray(self.global_rotation, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.length_scales = np.asarray(self.length_scales, dtype=float).reshape(-1)
        self.radius_scales = np.asarray(self.radius_scales, dtype=float).reshape(-1)
        self.global_scale = float(np.asarray(self.global_scale).reshape(-1)[0])
        n = self.joint_rotations.shape[0]
        if self.length_scales.shape != (n,) or self.radius_scales.shape != (n,):
            raise InvalidInputError("Per-bone parameter arrays disagree on bone count")

    @classmethod
    def rest(cls, n_bones, translation=None, global_scale=1.0):
        return cls(
            joint_rotations=np.zeros((n_bones, 3)),
            global_rotation=np.zeros(3),
            translation=np.zeros(3) if translation is None else translation,
            length_scales=np.ones(n_bones),
            radius_scales=np.ones(n_bones),
            global_scale=global_scale,
        )

    @property
    def n_bones(self):
        return self.joint_rotations.shape[0]

    def check(self, skeleton):
        """
        :raise InvalidInputError: if rotations exceed the bone limits or
            scales leave [0.5, 2]
        """
        if self.n_bones != skeleton.n_bones:
            raise InvalidInputError(
                f"Parameters have {self.n_bones} bones, skeleton has {skeleton.n_bones}"
            )
        if np.any(np.abs(self.joint_rotations) > skeleton.limits + 1e-12):
            raise InvalidInputError("Joint rotation exceeds its bone limit")
        lo, hi = SCALE_BOUNDS
        for name in ("length_scales", "radius_scales"):
            s = getattr(self, name)
            if np.any(s < lo) or np.any(s > hi):
                raise InvalidInputError(f"{name} must lie in [{lo}, {hi}]")
        if not self.global_scale > 0:
            raise InvalidInputError("global_scale must be positive")

    def project(self, skeleton):
        """Clip rotations to the bone limits and scales to their bounds, in place."""
        lim = skeleton.limits
        self.joint_rotations = np.clip(self.joint_rotations, -lim, lim)
        self.length_scales = np.clip(self.length_scales, *SCALE_BOUNDS)
        self.radius_scales = np.clip(self.radius_scales, *SCALE_BOUNDS)
        self.global_scale = max(self.global_scale, 1e-6)
        return self

    def to_store(self):
        store = ad.ParamStore()
        for k in self.KEYS:
            store[k] = np.atleast_1d(getattr(self, k))
        return store

    @classmethod
    def from_store(cls, store):
        return cls(**{k: np.array(store[k]) for k in cls.KEYS})

    def to_dict(self):
        """Flat key -> list of numbers, as written to params.json."""
        return {k: np.atleast_1d(getattr(self, k)).ravel().tolist() for k in self.KEYS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=float) for k in cls.KEYS if k in d})

    def copy(self):
        return PoseShapeParams.from_store(self.to_store())


def _bone_frames(skeleton, points):
    """Axial and radial parts of every point relative to every bone head, each (J, n, 3)."""
    heads = rest_heads(skeleton)
    dirs = np.array([b.tail for b in skeleton.bones], dtype=float)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rel = points[None, :, :] - heads[:, None, :]
    axial = np.einsum("jn,jk->jnk", np.einsum("jnk,jk->jn", rel, dirs), dirs)
    return axial, rel - axial


def _forward_kinematics(skeleton, joint_rotations, length_scales):
    """World rotations (J, 3, 3) and head positions (J, 3) as tensors."""
    local = ad.rodrigues(joint_rotations)
    rots, heads = [], []
    for i, b in enumerate(skeleton.bones):
        r_i = local[i]
        offset = np.asarray(b.offset, dtype=float)
        if b.parent is None:
            rots.append(r_i)
            heads.append(ad.constant(offset))
        else:
            p = b.parent
            rots.append(rots[p] @ r_i)
            heads.append(heads[p] + rots[p] @ (length_scales[p] * offset))
    return ad.stack(rots), ad.stack(heads)


def pose_points(skeleton, points, weights, params, frames=None):
    """
    Linear blend skinning of arbitrary rest-pose points. ``params`` maps the
    ``PoseShapeParams.KEYS`` to arrays or tensors; the result is a tensor.

    Each bone moves a point by scaling its axial part (along the bone) with the
    length scale and its radial part with the radius scale, then applying the
    bone's world rotation about its posed head.
    """
    points = np.asarray(points, dtype=float)
    axial, radial = _bone_frames(skeleton, points) if frames is None else frames
    n_bones = skeleton.n_bones
    ls = ad.constant(params["length_scales"])
    rs = ad.constant(params["radius_scales"])
    rots, heads = _forward_kinematics(skeleton, ad.constant(params["joint_rotations"]), ls)
    scaled = ad.reshape(ls, (n_bones, 1, 1)) * axial + ad.reshape(rs, (n_bones, 1, 1)) * radial
    per_bone = scaled @ ad.swapaxes(rots) + ad.reshape(heads, (n_bones, 1, 3))
    blended = ad.tsum(np.asarray(weights, dtype=float).T[:, :, None] * per_bone, axis=0)
    g = ad.rodrigues(params["global_rotation"])
    return ad.constant(params["global_scale"]) * (blended @ ad.swapaxes(g)) + params["translation"]


def pose_template_tensor(template, params):
    """Differentiable ``pose_template``; ``params`` maps keys to tensors."""
    if template._frames is None:
        template._frames = _bone_frames(template.skeleton, template.rest_vertices)
    frames = template._frames
    return pose_points(template.skeleton, template.rest_vertices, template.weights, params, frames)


def pose_template(template, params, check=True):
    """
    Posed template vertices.

    :param TemplateModel template: template to pose
    :param PoseShapeParams params: articulation and shape
    :param bool check: validate the parameters against the skeleton limits
    :return numpy.ndarray: (m, 3) posed vertices
    """
    if check:
        params.check(template.skeleton)
    return pose_template_tensor(template, params.to_store()).value


def compose_rigid(params, transform):
    """
    Fold a rigid transform applied after posing into the global parameters.

    :param PoseShapeParams params: parameters to start from
    :param RigidTransform transform: transform applied to the posed output
    :return PoseShapeParams: parameters whose pose equals transform(pose(params))
    """
    g = ad.rodrigues_matrix(params.global_rotation)
    out = params.copy()
    out.global_rotation = Rotation.from_matrix(transform.rotation @ g).as_rotvec()
    out.translation = transform.rotation @ params.translation + transform.translation
    return out
