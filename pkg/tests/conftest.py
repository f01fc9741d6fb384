"""
Shared fixtures: deterministic generators, small phantom sets and model
configurations sized for fast runs.
"""

import numpy as np
import pytest

from csc4net.core.concurrency import set_thread_cap
from csc4net.schemas.config import Correspondence, LayerSpec, ModalityMap, ModelConfig, PhantomSpec
from csc4net.services.phantoms import generate_pairs


@pytest.fixture(autouse=True)
def single_thread():
    set_thread_cap(1)
    yield
    set_thread_cap(None)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def identity_pairs():
    """Eight 16x16 phantoms whose B modality equals A"""
    return generate_pairs(8, PhantomSpec(size=16, n_shapes=4, seed=11))


@pytest.fixture(scope="session")
def gamma_pairs():
    return generate_pairs(8, PhantomSpec(size=16, n_shapes=4, modality_map=ModalityMap.parse("gamma:2.0"), seed=5))


@pytest.fixture
def tiny_config():
    """One 4-filter 2x2 layer, one epoch"""
    return ModelConfig(
        layers=[LayerSpec(filters=4, support=(2, 2))],
        epochs=1,
        batch_size=4,
        msp_max_iter=50,
    )


@pytest.fixture
def identity_config():
    """Complete 5x5 patch basis with fixed pairs and no alignment terms"""
    return ModelConfig(
        layers=[LayerSpec(filters=25, support=(5, 5))],
        epochs=1,
        batch_size=4,
        correspondence=Correspondence.FIXED_PAIRS,
        use_mmd=False,
        use_manifold=False,
        associator_ridge=1e-10,
    )


@pytest.fixture(scope="session")
def identity_state():
    """Model trained on A -> A with a complete basis; synthesis is near exact"""
    from csc4net.services.network import train

    pairs = generate_pairs(6, PhantomSpec(size=16, n_shapes=4, seed=23))
    images = [p.a for p in pairs]
    config = ModelConfig(
        layers=[LayerSpec(filters=25, support=(5, 5))],
        epochs=1,
        batch_size=3,
        correspondence=Correspondence.FIXED_PAIRS,
        use_mmd=False,
        use_manifold=False,
        associator_ridge=1e-10,
    )
    set_thread_cap(1)
    return train(images, images, config), pairs
