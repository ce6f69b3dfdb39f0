import os

import numpy as np
import pytest

from ura_feedback.fec import CodeSpec
from ura_feedback.models import ExperimentConfig
from ura_feedback.tx_chain import build_sensing_matrix

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
PRESETS_PATH = os.path.join(REPO_ROOT, "presets.yaml")


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture(scope="session")
def small_matrix():
    """400 x 2048 dictionary, small enough for per-test AMP runs."""
    return build_sensing_matrix(seed=11, n_p=400, b_p=11)


@pytest.fixture(scope="session")
def short_polar():
    """(128, 32) polar code with CRC-11, the FEC used by the fast harness tests."""
    return CodeSpec.polar(info_len=32, crc_len=11, coded_len=128, list_size=4)


def small_settings(**overrides):
    settings = dict(
        name="unit",
        k_active=2,
        n_info=32,
        n_preamble=300,
        n_payload=600,
        b_preamble=10,
        code="polar",
        coded_len=128,
        crc_len=11,
        list_size=4,
        preamble_ebn0_db=40.0,
        payload_ebn0_db=40.0,
        feedback_ebn0_db=20.0,
        variant="single_threshold",
        c_tilde=4.0,
        seed=3,
    )
    settings.update(overrides)
    return settings


@pytest.fixture
def small_config():
    def factory(**overrides) -> ExperimentConfig:
        return ExperimentConfig.model_validate(small_settings(**overrides))
    return factory


@pytest.fixture
def presets_path():
    return PRESETS_PATH
