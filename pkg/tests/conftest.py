import numpy as np
import pytest

from dcgra2seq.data import synthetic_corpus
from dcgra2seq.model import Gra2Seq, ModelConfig
from dcgra2seq.training import TrainConfig, train


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus(["circle", "zigzag"], 16)


@pytest.fixture
def toy_model():
    return Gra2Seq(ModelConfig.preset("toy", patches=4), seed=3)


@pytest.fixture(scope="session")
def briefly_trained(corpus):
    """A toy model after a short training run; shared because training costs seconds."""
    cfg = TrainConfig.preset("toy", epochs=10, seed=0)
    return train(corpus, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


OVERFIT_STEPS = 500


@pytest.fixture(scope="session")
def overfit_toy(corpus):
    """The toy preset trained for the full overfitting budget on the 32-sketch corpus, with wall time."""
    import time

    cfg = TrainConfig.preset("toy", epochs=10 ** 6, max_steps=OVERFIT_STEPS, seed=0)
    start = time.perf_counter()
    res = train(corpus, cfg)
    return res, time.perf_counter() - start
