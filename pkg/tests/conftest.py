from __future__ import annotations

import sys
from pathlib import Path

import pytest

SRC_DIR = Path(__file__).resolve().parent.parent / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from hippofusion.gradcheck import tiny_network_config  # noqa: E402
from hippofusion.models import RunConfig  # noqa: E402

# Small volumes: two ROI centers that hold ROI 8 plus a shift margin of 2.
TINY_CENTERS = {"left_hippocampus": [6, 8, 8], "right_hippocampus": [18, 8, 8]}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_run_payload(**overrides) -> dict:
    payload = {
        "seed": 7,
        "classifier_pair": "AD-NC",
        "input_mode": "sMRI_L+sMRI_R",
        "network": {
            "name": "custom",
            "conv_kernel_sizes": [3, 3],
            "conv_filter_counts": [2, 3],
            "fc_units": [4],
            "roi_size": 8,
        },
        "roi": {"centers": TINY_CENTERS},
        "training": {
            "iterations": 6,
            "q": 4,
            "mini_group_size": 2,
            "resplit_period": 3,
            "eval_period": 2,
        },
        "augmentation": {"k": 2, "test_subjects_per_class": 2, "test_augmented_per_class": 4},
        "evaluation": {"window": 4},
        "data": {
            "synth": {
                "subjects_per_class": {"AD": 6, "MCI": 6, "NC": 6},
                "volume_shape": [24, 16, 16],
                "radius": 2.5,
                "separation": 1.0,
                "seed": 3,
            }
        },
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(payload.get(key), dict):
            payload[key] = {**payload[key], **value}
        else:
            payload[key] = value
    return payload


@pytest.fixture
def tiny_config():
    return tiny_network_config()


@pytest.fixture
def tiny_run():
    return RunConfig.model_validate(tiny_run_payload())


@pytest.fixture
def tiny_run_factory():
    def make(**overrides):
        return RunConfig.model_validate(tiny_run_payload(**overrides))

    return make
