"""Shared fixtures: small synthetic data and a narrow network."""

import pytest

from py_fedpoison.data import Dataset, SplitBundle, SyntheticSpec, gen_synthetic, split
from py_fedpoison.federation import FederationConfig
from py_fedpoison.importance import ForestConfig
from py_fedpoison.nn import TrainConfig

from .helpers import SMALL_HIDDEN


@pytest.fixture
def synthetic() -> Dataset:
    """400 balanced rows, 4 features, feature 0 informative."""
    return gen_synthetic(SyntheticSpec(n=400, d=4, informative_feature=0, seed=11))


@pytest.fixture
def bundle(synthetic: Dataset) -> SplitBundle:
    """Two-client split of the synthetic fixture."""
    return split(synthetic, seed=5, num_clients=2)


@pytest.fixture
def small_train() -> TrainConfig:
    """Narrow network with a fixed learning rate."""
    return TrainConfig(batch_size=32, learning_rate=0.0099, hidden_sizes=SMALL_HIDDEN)


@pytest.fixture
def small_federation(small_train: TrainConfig) -> FederationConfig:
    """Three quick rounds over two clients with a small forest."""
    return FederationConfig(
        num_clients=2,
        rounds=3,
        train=small_train,
        seed=7,
        forest=ForestConfig(n_trees=5, max_depth=4, seed=3),
        importance_repeats=2,
    )
