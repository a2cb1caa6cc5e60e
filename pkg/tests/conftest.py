import numpy as np
import pytest
import torch

from urbangraph import (
    EncoderConfig,
    GraphConfig,
    SynthSpec,
    TrainConfig,
    assemble_graph,
    generate_synthetic_city,
)


@pytest.fixture(scope="session")
def tiny_bundle():
    """2x2 grid city: 12 segments, 4 parcels."""
    return generate_synthetic_city(SynthSpec(
        grid_w=2, grid_h=2, n_pois=20, n_trajectories=15,
        n_function_classes=2, seed=7))


@pytest.fixture(scope="session")
def tiny_graph(tiny_bundle):
    return assemble_graph(tiny_bundle)


@pytest.fixture(scope="session")
def small_bundle():
    """3x3 grid city with a denser POI/trajectory corpus."""
    return generate_synthetic_city(SynthSpec(
        grid_w=3, grid_h=3, n_pois=60, n_trajectories=40,
        n_function_classes=3, seed=11))


@pytest.fixture(scope="session")
def small_graph(small_bundle):
    return assemble_graph(small_bundle)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def small_train_config(seed: int = 0, **kwargs) -> TrainConfig:
    encoder = kwargs.pop("encoder", EncoderConfig(
        dim=16, n_heads=4, feature_dim=4, bias_dim=4,
        n_dist_buckets=5, n_angle_buckets=8))
    return TrainConfig(seed=seed, encoder=encoder, **kwargs)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
