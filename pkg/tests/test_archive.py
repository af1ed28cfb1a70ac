import json
import struct

import numpy as np
import pytest

from nfreg.archive import MAGIC, load_archive, read_manifest, save_archive, snap_to_float32
from nfreg.exceptions import ArchiveFormatError, ArchiveVersionError
from nfreg.field import NeuralDeformationField
from nfreg.segmentation import segment_template
from nfreg.synthetic import GeneratorConfig, sample_training_shape


@pytest.fixture
def field(template):
    seg = segment_template(template, 3, seed=0)
    f = NeuralDeformationField(template, seg, hidden=(8,), base_resolution=8, levels=2, seed=4)
    f.params = snap_to_float32(f.params)
    return f


@pytest.fixture
def archive(tmp_path, field):
    return save_archive(str(tmp_path / "nested" / "field.nfrw"), field, {"seed": 3})


def rewrite(path, fn):
    with open(path, "rb") as f:
        data = f.read()
    with open(path, "wb") as f:
        f.write(fn(data))


def edit_manifest(data, edit):
    magic, version, length = struct.unpack_from("<4sII", data)
    manifest = json.loads(data[12 : 12 + length].decode("utf-8"))
    edit(manifest)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return struct.pack("<4sII", magic, version, len(blob)) + blob + data[12 + length :]


class TestRoundTrip:
    def test_params_are_bit_exact(self, field, archive):
        loaded = load_archive(archive)
        assert sorted(loaded.params) == sorted(field.params)
        for k in field.params:
            assert loaded.params[k].tobytes() == field.params[k].tobytes()

    def test_layout_and_template(self, field, archive):
        loaded = load_archive(archive)
        assert loaded.template.digest() == field.template.digest()
        assert np.array_equal(loaded.segmentation.labels, field.segmentation.labels)
        assert loaded.hidden == (8,) and loaded.encoder == field.encoder
        assert not loaded.is_bound

    def test_same_predictions(self, template, field, archive):
        pair = sample_training_shape(template, 0, GeneratorConfig(m=60, n_points=200))
        loaded = load_archive(archive).bind_target(pair.target)
        field.bind_target(pair.target)
        queries = pair.target[:7]
        assert np.array_equal(loaded.query(queries), field.query(queries))

    def test_manifest(self, archive):
        manifest = read_manifest(archive)
        assert manifest["config"] == {"seed": 3}
        assert manifest["segmentation"]["n_segments"] == 3
        assert len(manifest["heads"]) == 3
        assert manifest["heads"][0]["params"] == ["h0.w0", "h0.b0", "h0.w1", "h0.b1"]

    def test_single_head(self, tmp_path, template):
        path = save_archive(str(tmp_path / "one.nfrw"), NeuralDeformationField(template, hidden=(4,)))
        manifest = read_manifest(path)
        assert len(manifest["heads"]) == 1 and manifest["config"] is None

    def test_snap_is_idempotent(self, field):
        again = snap_to_float32(field.params)
        assert all(np.array_equal(again[k], field.params[k]) for k in field.params)


class TestCorruptArchives:
    def test_bad_magic(self, archive):
        rewrite(archive, lambda d: b"XXXX" + d[4:])
        with pytest.raises(ArchiveFormatError):
            load_archive(archive)

    def test_unsupported_version(self, archive):
        rewrite(archive, lambda d: d[:4] + struct.pack("<I", 2) + d[8:])
        with pytest.raises(ArchiveVersionError):
            load_archive(archive)

    def test_truncated_payload(self, archive):
        rewrite(archive, lambda d: d[:-4])
        with pytest.raises(ArchiveFormatError):
            load_archive(archive)

    def test_truncated_manifest(self, archive):
        rewrite(archive, lambda d: d[:20])
        with pytest.raises(ArchiveFormatError):
            read_manifest(archive)

    def test_too_short(self, tmp_path):
        path = tmp_path / "tiny.nfrw"
        path.write_bytes(MAGIC)
        with pytest.raises(ArchiveFormatError):
            load_archive(str(path))

    def test_template_hash_mismatch(self, field, archive):
        digest = field.template.digest().encode()
        rewrite(archive, lambda d: d.replace(digest, b"0" * len(digest)))
        with pytest.raises(ArchiveFormatError):
            load_archive(archive)

    @pytest.mark.parametrize(
        "edit",
        [
            lambda m: m["template"].pop("m"),
            lambda m: m["template"].update(skeleton=5),
            lambda m: m["template"]["skeleton"]["bones"][0].pop("radius"),
            lambda m: m.pop("segmentation"),
        ],
    )
    def test_incomplete_manifest(self, archive, edit):
        rewrite(archive, lambda d: edit_manifest(d, edit))
        with pytest.raises(ArchiveFormatError, match="incomplete"):
            load_archive(archive)
