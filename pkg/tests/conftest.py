import numpy as np
import pytest

from unlearn_audit.datasets import gen_blobs, split_random
from unlearn_audit.model import ModelConfig
from unlearn_audit.unlearning import TrainingHyper, train


@pytest.fixture(scope="session")
def small_blobs():
    return gen_blobs(3, 6, 60, 0.6, seed=7)


@pytest.fixture(scope="session")
def small_unlearn(small_blobs):
    return split_random(small_blobs, 0.1, seed=7)


@pytest.fixture(scope="session")
def small_hyper():
    return TrainingHyper(epochs=2, batch_size=16, learning_rate=5e-2, weight_decay=5e-4)


@pytest.fixture(scope="session", params=["linear", "mlp:8"])
def small_config(request, small_blobs):
    return ModelConfig.parse_arch(request.param, small_blobs.dim, small_blobs.num_classes, 5e-4)


@pytest.fixture(scope="session")
def small_pot(small_blobs, small_hyper):
    cfg = ModelConfig.parse_arch("mlp:8", small_blobs.dim, small_blobs.num_classes, 5e-4)
    return train(small_blobs, cfg, small_hyper, seed=3)


def rand_rows(rng, n, d, k):
    return rng.standard_normal((n, d)), rng.integers(0, k, size=n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
