import os
import sys

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, _ROOT)

import numpy as np
import pytest

from modules.dsp import extract_features
from modules.neuralnet import ModelArchitecture, TrainConfig, build_model, train
from modules.signals import DatasetSpec, LabeledExample, StateLabel, iter_dataset, split_dataset

REFERENCE_CONFUSION = [
    [410, 0, 0],
    [0, 1006, 4],
    [0, 15, 40],
]
REFERENCE_PREDICTIONS = os.path.join(_ROOT, "assets", "reference_predictions.csv")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size statistical and end-to-end runs (deselect with -m \"not slow\")")


@pytest.fixture
def reference_counts():
    return np.array(REFERENCE_CONFUSION)


@pytest.fixture(scope="session")
def small_spec():
    return DatasetSpec(
        frame_len=256,
        counts={StateLabel.NOMINAL: 40, StateLabel.CURRENT: 40, StateLabel.DEFECTIVE: 40},
        seed=7,
    )


@pytest.fixture(scope="session")
def small_examples(small_spec):
    return [LabeledExample(extract_features(pair).components, pair.label) for pair in iter_dataset(small_spec)]


@pytest.fixture(scope="session")
def small_split(small_examples):
    return split_dataset(small_examples, seed=0)


@pytest.fixture(scope="session")
def small_arch():
    return ModelArchitecture(hidden=(32, 16), bn_momentum=0.9)


@pytest.fixture(scope="session")
def trained_small(small_arch, small_split):
    """A small network trained on the small synthetic corpus: (model, history)"""
    model = build_model(small_arch, seed=3)
    config = TrainConfig(epochs=30, batch_size=16, seed=1, learning_rate=0.01)
    return train(model, small_split, config)
