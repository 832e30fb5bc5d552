import numpy as np
import pytest

from tinyrnnt import networks
from tinyrnnt.transducer import Lattice


def random_log_prob_grid(T, U, V, rng):
    """Node-wise normalized random log-distributions, shape (T, U+1, V+1)."""
    logits = rng.normal(size=(T, U + 1, V + 1))
    return networks.log_softmax(logits)


def random_lattice(T, U, V, rng):
    targets = rng.integers(1, V + 1, size=U).tolist()
    return Lattice(random_log_prob_grid(T, U, V, rng), targets, list(targets))


def uniform_lattice(T, U, V, targets):
    grid = np.full((T, U + 1, V + 1), -np.log(V + 1))
    return Lattice(grid, list(targets), list(targets))


@pytest.fixture
def tiny_model():
    """A sub-1k-parameter model for gradient math (V=3, d=4, 4-unit layers)."""
    rng = np.random.default_rng(7)
    vocab = networks.default_vocabulary(3)
    return networks.init_model(
        vocab,
        feature_dim=4,
        trans_layers=1,
        trans_hidden=4,
        pred_hidden=4,
        embed_dim=4,
        joint_dim=4,
        rng=rng,
    )
