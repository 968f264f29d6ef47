import numpy as np
import pytest

from vlae_lab.domain.data import SynthSpec, synth
from vlae_lab.domain.model import ModelSpec, Vlae

IMAGE_SHAPE = (1, 6, 6)

# 小さめのモデル: CPU で数秒以内
SMALL_OVERRIDES = {
    "data.n_images": 64,
    "data.height": 6,
    "data.width": 6,
    "model.latent_dim": 4,
    "model.flow_steps": 2,
    "model.flow_hidden": 8,
    "model.encoder_channels": 4,
    "model.encoder_hidden": 16,
    "model.decoder_layers": 3,
    "model.decoder_channels": 4,
    "model.decoder_hidden": 16,
    "run.batch_size": 8,
    "run.steps": 10,
    "run.checkpoint_every": 5,
    "run.log_every": 5,
    "run.k": 4,
}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def image_shape() -> tuple[int, int, int]:
    return IMAGE_SHAPE


@pytest.fixture
def small_spec() -> ModelSpec:
    return ModelSpec(
        latent_dim=4,
        flow_steps=2,
        flow_hidden=8,
        encoder_channels=4,
        encoder_hidden=16,
        decoder_layers=3,
        decoder_channels=4,
        decoder_hidden=16,
    )


@pytest.fixture
def small_model(small_spec: ModelSpec) -> Vlae:
    return Vlae(np.random.default_rng(0), IMAGE_SHAPE, small_spec)


@pytest.fixture
def images() -> np.ndarray:
    return synth(SynthSpec(height=6, width=6, seed=3), 8).images


@pytest.fixture
def small_overrides() -> dict[str, object]:
    return dict(SMALL_OVERRIDES)
