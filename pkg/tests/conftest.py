import numpy as np
import pytest
from hypothesis import settings

from captime import cli
from captime.data_io import SyntheticSpec, generate_synthetic
from captime.model import CAPTime
from captime.text_embed import Vocabulary

settings.register_profile("captime", max_examples=50, deadline=None)
settings.load_profile("captime")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(SyntheticSpec(length=240, period=8, segment=8, seed=3))


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return Vocabulary.build([r.text for r in tiny_corpus.texts], min_freq=1)


@pytest.fixture
def tiny_cfg():
    return cli.tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg, tiny_vocab):
    return CAPTime.build(tiny_cfg, tiny_vocab, seed=0)
