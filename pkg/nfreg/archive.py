"""
Binary weight archive for trained fields.

Layout: the magic bytes ``NFRW``, a little-endian uint32 format version, a
little-endian uint32 manifest length, the UTF-8 JSON manifest and finally
every parameter as little-endian float32, in manifest order.
"""

import json
import logging
import os
import struct

import numpy as np

from . import autodiff as ad
from ._version import __version__
from .exceptions import ArchiveFormatError, ArchiveVersionError
from .config import locked_file
from .field import NeuralDeformationField
from .segmentation import Segmentation
from .skeleton import SkeletonSpec, build_template

_LOGGER = logging.getLogger(__name__)

MAGIC = b"NFRW"
ARCHIVE_VERSION = 1
SUPPORTED_VERSIONS = (1,)
_HEADER = struct.Struct("<4sII")
_PAYLOAD_DTYPE = np.dtype("<f4")

__all__ = ["save_archive", "load_archive", "read_manifest", "snap_to_float32"]


def snap_to_float32(params):
    """
    Round every parameter to the nearest float32 value (kept as float64).

    A field with snapped parameters survives a save/load cycle bit-for-bit.

    :param ParamStore params: parameters
    :return ParamStore: a new store
    """
    out = ad.ParamStore()
    for k, v in params.items():
        out[k] = np.asarray(v, dtype=np.float32).astype(np.float64)
    return out


def _manifest(field, config):
    names = list(field.params.keys())
    return {
        "format": "nfreg-weights",
        "nfreg_version": __version__,
        "template": field.template.recipe(),
        "template_sha256": field.template.digest(),
        "segmentation": {
            "n_segments": int(field.segmentation.n_segments),
            "labels": [int(x) for x in field.segmentation.labels],
        },
        "heads": [
            {"widths": list(spec.widths), "params": field.head_param_names(j)}
            for j, spec in enumerate(field.head_specs)
        ],
        "hidden": list(field.hidden),
        "offset_cap": field.offset_cap,
        "encoder": dict(field.encoder),
        "params": [{"name": n, "shape": list(np.shape(field.params[n]))} for n in names],
        "config": config,
    }


def save_archive(path, field, config=None):
    """
    Write a trained field to ``path``.

    :param str path: destination file
    :param NeuralDeformationField field: field to store
    :param Mapping config: settings recorded verbatim in the manifest
    :return str: absolute path of the archive
    """
    manifest = _manifest(field, None if config is None else dict(config))
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(field.params[p["name"]], dtype=_PAYLOAD_DTYPE).tobytes()
        for p in manifest["params"]
    )
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with locked_file(path):
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, ARCHIVE_VERSION, len(blob)))
            f.write(blob)
            f.write(payload)
    _LOGGER.info(f"Saved {len(manifest['params'])} parameter arrays to '{path}'")
    return os.path.abspath(path)


def _read(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise ArchiveFormatError(f"'{path}' is too short to be a weight archive")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ArchiveFormatError(f"'{path}' is not a weight archive (magic {magic!r})")
    if version not in SUPPORTED_VERSIONS:
        raise ArchiveVersionError(
            f"'{path}' has archive version {version}; supported: {list(SUPPORTED_VERSIONS)}"
        )
    end = _HEADER.size + length
    if len(data) < end:
        raise ArchiveFormatError(f"'{path}' is truncated inside its manifest")
    try:
        manifest = json.loads(data[_HEADER.size : end].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise ArchiveFormatError(f"'{path}' has an unreadable manifest: {e}")
    return manifest, data[end:]


def read_manifest(path):
    """Header check plus the decoded JSON manifest, without building the field."""
    manifest, _ = _read(path)
    return manifest


def load_archive(path):
    """
    Rebuild a field from an archive.

    :param str path: archive file
    :return NeuralDeformationField: unbound field with the stored parameters
    :raise ArchiveVersionError: if the format version is not supported
    :raise ArchiveFormatError: if the file is not an archive, is truncated, or
        its template does not rebuild to the recorded hash
    """
    manifest, payload = _read(path)
    try:
        entries = manifest["params"]
        counts = [int(np.prod(e["shape"], dtype=np.int64)) for e in entries]
        recipe = manifest["template"]
        seg = manifest["segmentation"]
        skeleton = SkeletonSpec.from_dict(recipe["skeleton"])
        m, seed, knn_k = recipe["m"], recipe["seed"], recipe.get("knn_k", 8)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ArchiveFormatError(f"'{path}' manifest is incomplete: {e}")
    expected = sum(counts) * _PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise ArchiveFormatError(
            f"'{path}' payload holds {len(payload)} bytes, manifest expects {expected}"
        )
    template = build_template(skeleton, m=m, seed=seed, knn_k=knn_k)
    if template.digest() != manifest.get("template_sha256"):
        raise ArchiveFormatError(f"'{path}' template does not rebuild to the recorded hash")
    values = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE)
    params = ad.ParamStore()
    offset = 0
    for entry, count in zip(entries, counts):
        chunk = values[offset : offset + count].astype(np.float64)
        params[entry["name"]] = chunk.reshape(entry["shape"])
        offset += count
    try:
        segmentation = Segmentation(seg["labels"], seg["n_segments"])
        template.labels = segmentation.labels
        field = NeuralDeformationField(
            template,
            segmentation,
            hidden=manifest["hidden"],
            offset_cap=manifest["offset_cap"],
            params=params,
            **manifest["encoder"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ArchiveFormatError(f"'{path}' does not describe a valid field: {e}")
    _LOGGER.info(f"Loaded {field!r} from '{path}'")
    return field
