import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from surgseg.network import NetworkConfig


@pytest.fixture(scope="session")
def mini_config():
    """Factory for a scaled-down architecture that keeps CPU tests fast."""

    def make(num_classes: int = 2, grids=(1,), channels: int = 8) -> NetworkConfig:
        return NetworkConfig(
            num_classes=num_classes,
            main_stage_channels=(channels,) * 5,
            aux_stage_channels=(channels,) * 3,
            spp_grids=tuple(grids),
        )

    return make


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six 96x128 parts-task samples split across a train and a test sequence."""
    from surgseg.data import generate_synthetic

    root = tmp_path_factory.mktemp("smallds")
    return generate_synthetic(
        root, 6, task="parts", seed=3, frame_size=(96, 128), sequences=(1, 7)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
