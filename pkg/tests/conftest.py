"""Shared fixtures: tiny corpora and a briefly trained model.

Everything here is deliberately small — the heavyweight runs live in
``test_acceptance.py`` behind session-scoped fixtures of their own.
"""

import numpy as np
import pytest

from structgen import data, training
from structgen.model import ModelConfig, ShapeVAE
from structgen.shapes import (
    BoxParams,
    Part,
    RelEdge,
    RelType,
    ShapeTree,
    Vocabulary,
    get_vocabulary,
    register_vocabulary,
)


@pytest.fixture(scope="session")
def chair_corpus16():
    """16 generated chairs at the small sample grid (fast to evaluate)."""
    return data.generate_dataset(data.chair_config(per_face=9), 16, seed=20)


@pytest.fixture(scope="session")
def table_corpus8():
    return data.generate_dataset(data.table_config(per_face=9), 8, seed=21)


@pytest.fixture(scope="session")
def small_model():
    """An untrained model sized for speed; deterministic parameters."""
    vocab = get_vocabulary("chair")
    config = ModelConfig(
        label_count=len(vocab.labels), feature_dim=32, hidden_dim=32,
        mp_rounds=2, decode_depth_cap=4,
    )
    return ShapeVAE(config, seed=3)


PAIRBOX_MODEL_SEED = 1  # margin-screened: see test_losses gradient test


def pairbox_fixture():
    """A 3-part shape (two mirror-twin touching slabs) with its own tiny
    vocabulary, used by the finite-difference gradient checks.

    The slabs share the x=0 face, so the adjacency residual is exactly
    zero, and they mirror across that plane, so the reflective residual
    is too.
    """
    vocab = Vocabulary(
        category="pairbox",
        labels=("assembly", "slab", "slab_mirror"),
        legal_children={"assembly": ("slab", "slab_mirror")},
    )
    register_vocabulary(vocab)
    identity = np.array([1.0, 0.0, 0.0, 0.0])
    left = Part(
        label=1,
        box=BoxParams(np.array([-0.25, 0.0, 0.0]), identity, np.array([0.5, 0.4, 0.3])),
    )
    right = Part(
        label=2,
        box=BoxParams(np.array([0.25, 0.0, 0.0]), identity, np.array([0.5, 0.4, 0.3])),
    )
    root = Part(
        label=0,
        box=BoxParams(np.zeros(3), identity, np.array([1.0, 0.4, 0.3])),
        children=(left, right),
        edges=(RelEdge(0, 1, RelType.ADJACENCY), RelEdge(0, 1, RelType.REFLECTIVE)),
    )
    return ShapeTree(category="pairbox", root=root)


@pytest.fixture(scope="session")
def gradient_fixture():
    """(model, shape, latent noise) for the finite-difference sweeps."""
    shape = pairbox_fixture()
    config = ModelConfig(
        label_count=3, feature_dim=8, hidden_dim=8, mp_rounds=1, decode_depth_cap=2
    )
    model = ShapeVAE(config, seed=PAIRBOX_MODEL_SEED)
    eps_lat = np.random.default_rng(PAIRBOX_MODEL_SEED + 1000).standard_normal((1, 8))
    return model, shape, eps_lat


@pytest.fixture(scope="session")
def overfit_pair(tmp_path_factory):
    """A model overfit to one chair, plus the chair.

    Enough steps that free decodes carry real structure (parts, edges),
    which the latent-space and estimator tests rely on.
    """
    shape = data.generate_shape(data.chair_config(per_face=9), seed=7, index=3)
    vocab = get_vocabulary("chair")
    config = ModelConfig(
        label_count=len(vocab.labels), feature_dim=64, hidden_dim=64,
        mp_rounds=2, decode_depth_cap=4,
    )
    model = ShapeVAE(config, seed=0)
    train_config = training.TrainConfig(
        mode="ae", beta=0.0, epochs=500, batch_size=1, lr=1e-3,
        lr_halve_every=None, seed=0, per_face=9,
        eval_every=10**9, checkpoint_every=10**9,
    )
    out = tmp_path_factory.mktemp("overfit_run")
    training.train(model, [shape], train_config, out)
    return model, shape
