import time
from dataclasses import replace

import pytest

from cascade_det import cascade
from cascade_det.data import DatasetConfig, generate_dataset, split_dataset
from cascade_det.model import FeatureConfig

HELDOUT = 100


@pytest.fixture(scope="session")
def small_scenes():
    """Fast dataset for unit tests."""
    return generate_dataset(DatasetConfig(n_images=40, seed=7))


@pytest.fixture(scope="session")
def benchmark():
    """Default config, seed 42: (train, heldout)."""
    return split_dataset(generate_dataset(DatasetConfig()), HELDOUT)


@pytest.fixture(scope="session")
def feature_config():
    return FeatureConfig()


@pytest.fixture(scope="session")
def train_config():
    return cascade.TrainConfig()


class Models:
    """Lazily trained benchmark detectors, shared across the session."""

    def __init__(self, train, fc, tc):
        self.train, self.fc, self.tc = train, fc, tc
        self._cache = {}
        self.train_seconds = {}

    def _get(self, key, fn):
        if key not in self._cache:
            start = time.perf_counter()
            self._cache[key] = fn()
            self.train_seconds[key] = time.perf_counter() - start
        return self._cache[key]

    @property
    def cascade(self):
        return self._get("cascade", lambda: cascade.train_cascade(self.train, (0.5, 0.6, 0.7), self.fc, self.tc))

    @property
    def baseline(self):
        return self._get("baseline", lambda: cascade.train_baseline(self.train, 0.5, self.fc, self.tc))

    @property
    def u07(self):
        return self._get("u07", lambda: cascade.train_baseline(self.train, 0.7, self.fc, self.tc))

    @property
    def iterative(self):
        return self._get("iterative", lambda: cascade.train_iterative(self.train, 0.5, 3, self.fc, self.tc))

    @property
    def integral(self):
        return self._get("integral", lambda: cascade.train_integral(self.train, (0.5, 0.6, 0.7), self.fc, self.tc))

    @property
    def no_iou_up(self):
        return self._get(
            "no_iou_up", lambda: cascade.train_cascade(self.train, (0.5, 0.6, 0.7), self.fc, replace(self.tc, iou_up=False))
        )

    @property
    def no_stat(self):
        return self._get(
            "no_stat", lambda: cascade.train_cascade(self.train, (0.5, 0.6, 0.7), self.fc, replace(self.tc, use_stats=False))
        )


@pytest.fixture(scope="session")
def models(benchmark, feature_config, train_config):
    return Models(benchmark[0], feature_config, train_config)
