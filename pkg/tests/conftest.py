import json
from pathlib import Path

import numpy as np
import pytest

from dlsense.detectnet import DetectNetConfig, build
from dlsense.sigmod import DatasetSpec, ModScheme, synth_dataset

REFERENCE_NETS = Path(__file__).parent / 'data' / 'reference_nets.json'


@pytest.fixture
def g():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def tiny_spec():
    """Small QAM16 dataset on a 5-point grid."""
    return DatasetSpec(schemes=(ModScheme.QAM16,), sample_length=32, snr_grid=(-4, -2, 0, 2, 4),
                       counts=(60, 30, 30), seed=7)


@pytest.fixture(scope='session')
def tiny_splits(tiny_spec):
    return synth_dataset(tiny_spec)


@pytest.fixture
def small_config():
    """Reduced DetectNet used across the training and gradient tests."""
    return DetectNetConfig(sample_length=32, conv_filters=8, kernel=5, lstm_cells=16, fc1_units=16,
                           batch=20, lr=0.001, reference_precision=True)


@pytest.fixture
def small_model(small_config):
    return build(small_config, seed=3)


@pytest.fixture(scope='session')
def reference_nets():
    """Hand-set weights with hand-computed eval-mode outputs."""
    with open(REFERENCE_NETS, encoding='utf-8') as f:
        return json.load(f)
