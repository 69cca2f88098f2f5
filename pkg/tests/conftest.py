import numpy as np
import pytest
import torch

from llm_mde.backbone import BackboneConfig
from llm_mde.dataset import SceneSample, DepthMap, write_index, write_sample, generate_synthetic_scene
from llm_mde.model import LlmMde, ModelConfig

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    marker = _criteria.get(report.nodeid)
    if marker is not None:
        num, text = marker
        prev = _criteria.setdefault(("result", num), [text, True])
        prev[1] = prev[1] and report.passed


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    rows = sorted((k[1], v) for k, v in _criteria.items() if isinstance(k, tuple))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, (text, ok) in rows:
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(d_m=16, D=16, V=128, vision_layers=1, text_layers=1, heads=2,
                          patch_size=8, dropout=0.0, image_size=32, max_text_len=64)


@pytest.fixture
def tiny_model(tiny_backbone):
    cfg = ModelConfig(backbone=tiny_backbone, n_prototypes=8, head_channels=(8, 4, 4, 4))
    return LlmMde(cfg, seed=0)


@pytest.fixture
def nyu_dir(tmp_path):
    """Three 640x480 pairs in the index-file layout."""
    rng = np.random.default_rng(0)
    entries = []
    for i, label in enumerate(["bedroom", "kitchen", "bathroom"]):
        image = rng.random((480, 640, 3)).astype(np.float32)
        depth = rng.uniform(0.5, 9.0, (480, 640)).astype(np.float32)
        valid = np.ones_like(depth, dtype=bool)
        valid[0, 0] = False
        sample = SceneSample(image, DepthMap(depth, valid), label)
        rgb, dep = write_sample(tmp_path, f"s{i}", sample)
        entries.append((rgb, dep, label))
    write_index(tmp_path, entries)
    return tmp_path
