import numpy as np
import pytest

from carpe import tensor as tc
from carpe.dataio import FrameSample, to_relative
from carpe.model import CarpeModel, Hyper

from synth import write_registry


@pytest.fixture
def f64():
    with tc.precision("f64"):
        yield


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return write_registry(tmp_path_factory.mktemp("toy"))


@pytest.fixture
def model():
    return CarpeModel.init(Hyper(), seed=3)


def random_sample(rng, num_peds, beta=8, pred_len=12, scene="s"):
    start = rng.uniform(0, 10, size=(num_peds, 1, 2))
    steps = rng.normal(0.3, 0.1, size=(num_peds, beta + pred_len, 2))
    track = start + np.cumsum(steps, axis=1)
    obs = track[:, :beta]
    return FrameSample(scene, 0, np.arange(num_peds), obs, to_relative(obs), track[:, beta:])


@pytest.fixture
def make_sample():
    return random_sample
