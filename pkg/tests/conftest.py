import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from convrag.corpus import SynthSpec, synth_corpus  # noqa: E402
from convrag.model import ModelConfig, ModelState  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(SynthSpec(n_sessions=10, turns_per_session=3, collection_size=100,
                                  vocab_size=256, seed=3))


@pytest.fixture
def micro_state():
    """d_model=4, one layer: the gradient-check model."""
    cfg = ModelConfig(vocab_size=256, d_model=4, n_layers=1, n_heads=2, max_seq_len=64,
                      eos_token_id=2, seed=11, init_std=0.3)
    return ModelState.init(cfg)


@pytest.fixture
def tiny_state():
    cfg = ModelConfig(vocab_size=256, d_model=8, n_layers=2, n_heads=2, max_seq_len=96,
                      eos_token_id=2, seed=5, init_std=0.2)
    return ModelState.init(cfg)


def constant_embedding_state(cfg):
    """A model whose every hidden state equals one fixed vector."""
    st = ModelState.init(cfg)
    st.params["ln_f.g"].values[:] = 0.0
    st.params["ln_f.b"].values[:] = np.linspace(0.1, 0.5, cfg.d_model)
    return st
