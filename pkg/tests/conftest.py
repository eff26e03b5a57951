import numpy as np
import pytest

from xdora.fusion import FusionConfig, init_params
from xdora.rng import make_rng
from xdora.synthetic import make_synthetic_records


@pytest.fixture
def toy_config():
    return FusionConfig(d_v=8, d_t=16, S=4, heads=2, C=4,
                        dropout_rate=0.0, hidden_dim=8)


@pytest.fixture
def toy_params(toy_config):
    return init_params(toy_config, make_rng(0))


@pytest.fixture
def toy_records(toy_config):
    return make_synthetic_records(
        12, toy_config.d_v, toy_config.S, toy_config.d_t, toy_config.C, seed=1)


@pytest.fixture
def rng():
    return make_rng(1234)


def random_record_batch(n, d_v=5, S=3, d_t=6, C=2, seed=0, with_captions=False):
    return make_synthetic_records(n, d_v, S, d_t, C, seed=seed,
                                  with_captions=with_captions)


@pytest.fixture
def record_factory():
    return random_record_batch
