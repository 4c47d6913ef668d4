import sys
from pathlib import Path

import numpy as np
import pytest

# make tests/gradcheck.py importable without packaging the test tree
sys.path.insert(0, str(Path(__file__).parent))


TINY_ENV_CFG = dict(emb_dim=32, hid_dim=48)


def train_tiny_env(task="copy", seed=3, n_train=400, vocab=14, max_len=6,
                   stop_bleu=99.5, max_epochs=150):
    """Small but convergent environment for structural tests."""
    from simtlab.data import TaskSpec, generate_pairs
    from simtlab.environment import EnvTrainConfig, train_consecutive

    rng = np.random.default_rng(seed)
    spec = TaskSpec(task=task, vocab_size=vocab, min_len=2, max_len=max_len,
                    n_train=n_train, n_valid=60, n_test=60)
    train = generate_pairs(spec, n_train, rng)
    valid = generate_pairs(spec, 60, rng)
    test = generate_pairs(spec, 60, rng)
    cfg = EnvTrainConfig(max_epochs=max_epochs, patience=60, seed=seed, lr=0.005,
                         stop_bleu=stop_bleu, val_cap=40, **TINY_ENV_CFG)
    model, history = train_consecutive(train, valid, cfg)
    return model, train, valid, test, history


@pytest.fixture(scope="session")
def tiny_copy_env():
    return train_tiny_env("copy")


@pytest.fixture(scope="session")
def untrained_env():
    """Randomly initialized small environment; structure-only tests."""
    from simtlab.data import TaskSpec, generate_pairs
    from simtlab.environment import EnvConfig, EnvModel
    from simtlab.vocab import Vocabulary

    rng = np.random.default_rng(0)
    spec = TaskSpec(task="copy", vocab_size=16, min_len=2, max_len=7)
    pairs = generate_pairs(spec, 50, rng)
    sv = Vocabulary.from_corpus(s for s, _ in pairs)
    tv = Vocabulary.from_corpus(t for _, t in pairs)
    model = EnvModel(sv, tv, EnvConfig(emb_dim=20, hid_dim=28), rng)
    return model, pairs
