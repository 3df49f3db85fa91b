import numpy as np
import pytest

from irnet.config import TrainConfig
from irnet.episodes import generate_synthetic, split_domains


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(n_classes=12, vocab_size=120, n_instances=360, seed=5)


@pytest.fixture(scope="session")
def small_split(small_data):
    return split_domains(small_data.domains, ["d1"], ["d2"])


@pytest.fixture
def tiny_cfg():
    return TrainConfig(hidden_size=8, attention_size=6, n_way=3, k_shot=1, n_query=4, epochs=2,
                       tasks_per_epoch=3, eval_episodes=3, embedding_std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
