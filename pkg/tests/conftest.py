import numpy as np
import pytest
import torch

from eegsr.model import FlowAutoencoder, ModelConfig
from eegsr.pipeline import Epoch
from eegsr.synth import standard_layout_64

torch.manual_seed(0)


@pytest.fixture(scope="session")
def layout64():
    return standard_layout_64()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_geometry(n_channels, layout=None):
    layout = layout if layout is not None else standard_layout_64()
    return layout.subset(np.arange(n_channels))


def make_epoch(n_channels, rng, scale=1.0, geometry=None):
    geometry = geometry if geometry is not None else make_geometry(n_channels)
    samples = rng.standard_normal((n_channels, 1280)) * scale
    return Epoch(samples, geometry, np.zeros(n_channels, dtype=bool))


TINY_CFG = ModelConfig(
    d_model=32, n_heads=4, head_dim=8, n_layers_enc=2, n_layers_dec=2
)


@pytest.fixture
def tiny_model():
    return FlowAutoencoder(TINY_CFG, seed=7)
