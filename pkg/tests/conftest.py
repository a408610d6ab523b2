from __future__ import annotations

import numpy as np
import pytest

from playrec.betamix import EmConfig
from playrec.dataio import generate_synthetic, split_dataset
from playrec.mrw import WalkConfig, WalkEngine
from playrec.pipeline import fit_stage


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(60, 40, 5, seed=3)


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return split_dataset(small_dataset, seed=3)


@pytest.fixture(scope="session")
def small_fit(small_split):
    return fit_stage(small_split[0], EmConfig())


@pytest.fixture(scope="session")
def small_engine(small_split, small_fit):
    return WalkEngine(small_split[0], small_fit.assignment, WalkConfig(Q=2, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
