""" Test suite shared objects and setup """
import os

import hypothesis
import numpy as np
import pytest

from nfreg.field import NeuralDeformationField, cap_rows
from nfreg.skeleton import build_template

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def data_path():
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")


@pytest.fixture
def cfg_file(data_path):
    return os.path.join(data_path, "pipeline.yaml")


@pytest.fixture
def bad_cfg_file(data_path):
    return os.path.join(data_path, "bad_crop.yaml")


@pytest.fixture
def template():
    return build_template(m=60, seed=0, knn_k=8)


@pytest.fixture
def tiny_field(template):
    return NeuralDeformationField(
        template, hidden=(8,), base_resolution=8, levels=2, seed=0
    )


class OracleField(object):
    """
    Stand-in for a trained field that knows the answer: every tracker's
    offset points straight at its ground-truth vertex.
    """

    def __init__(self, template, gt_vertices, offset_cap=0.05):
        self.template = template
        self.gt = np.asarray(gt_vertices, dtype=float)
        self.offset_cap = offset_cap
        self.target = None
        self.n_heads = 1

    @property
    def n_vertices(self):
        return len(self.gt)

    @property
    def is_bound(self):
        return self.target is not None

    def bind_target(self, target):
        self.target = np.asarray(target, dtype=float)
        return self

    def clone(self):
        other = OracleField(self.template, self.gt, self.offset_cap)
        other.target = self.target
        return other

    def raw_offsets(self, points):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return self.gt[None, :, :] - pts[:, None, :]

    def vertex_offsets(self, points, capped=True):
        out = self.gt - np.asarray(points, dtype=float)
        return cap_rows(out, self.offset_cap) if capped else out


@pytest.fixture
def oracle_factory():
    return OracleField
