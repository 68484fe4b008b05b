import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from melmo.model import LayerState, ModelConfig, init_params
from melmo.wordpiece import load_vocab

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
MINI_VOCAB = os.path.join(DATA_DIR, "mini_vocab.txt")


@pytest.fixture(scope="session")
def mini_vocab_path():
    return MINI_VOCAB


@pytest.fixture(scope="session")
def mini_vocab():
    return load_vocab(MINI_VOCAB)


@pytest.fixture
def tiny_config():
    """Small float64 model for verification-grade tests."""
    return ModelConfig(layers=2, width=8, state_size=16, proj_size=4,
                       vocab_size=50, dtype="float64")


@pytest.fixture
def tiny_params(tiny_config):
    params = init_params(tiny_config, seed=3)
    # randomize the softmax head (zero-initialized by design) so gradients
    # reach every upstream parameter
    rng = np.random.default_rng(42)
    params.out_w.data = rng.uniform(-0.3, 0.3, params.out_w.data.shape)
    params.out_b.data = rng.uniform(-0.1, 0.1, params.out_b.data.shape)
    return params


def random_states(config, batch, seed=7, scale=0.5):
    rng = np.random.default_rng(seed)
    states = LayerState.zeros(config, batch)
    for layer in states.pairs:
        for h, c in layer:
            h[:] = rng.uniform(-scale, scale, h.shape)
            c[:] = rng.uniform(-2 * scale, 2 * scale, c.shape)
    return states


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """Session-wide synthetic corpus + matching ~8k vocab for slow tests."""
    from synthcorpus import SynthLanguage, write_corpus, write_vocab
    root = tmp_path_factory.mktemp("synth")
    lang = SynthLanguage(seed=0)
    paths = {
        "vocab": str(root / "vocab.txt"),
        "train": str(root / "train.txt"),
        "dev": str(root / "dev.txt"),
        "test": str(root / "test.txt"),
    }
    write_vocab(paths["vocab"], lang)
    paths["train_words"] = write_corpus(paths["train"], lang, 500_000, seed=1)
    paths["dev_words"] = write_corpus(paths["dev"], lang, 25_000, seed=2)
    paths["test_words"] = write_corpus(paths["test"], lang, 25_000, seed=3)
    return paths
