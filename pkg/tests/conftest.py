import pytest

from nicelab.losses import LossWeights
from nicelab.model import ModelConfig
from nicelab.scene import GenerationConfig, generate_dataset
from nicelab.trainer import TrainConfig

SMALL_GEN = GenerationConfig(height=32, width=32, min_size=6, max_size=12, max_instances=3)
SMALL_MODEL = ModelConfig(channels=8, embed_dim=8, layers=2, heads=2, hidden=8)


@pytest.fixture(scope="session")
def small_scenes():
    return generate_dataset(100, 3, SMALL_GEN)


@pytest.fixture
def small_cfg():
    return TrainConfig(epochs=2, batch_size=2, lr=1e-3, schedule="constant", seed=3, model=SMALL_MODEL,
                       weights=LossWeights())
