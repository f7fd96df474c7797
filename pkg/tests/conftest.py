import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from hrcloud.config import AblationFlags, BackboneConfig, DecoderConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(base_width=2, stem_width=4)


@pytest.fixture
def tiny_decoder():
    return DecoderConfig(head_channels=4)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def full_flags():
    return AblationFlags()
