import dataclasses

import numpy as np
import pytest

from scopeformer.config import ScopeformerConfig
from scopeformer.ingest import synth_generate


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_samples():
    return synth_generate(seed=99, n=12, image_size=64)


def tiny_config(**overrides) -> ScopeformerConfig:
    """Smallest config that exercises the full pipeline quickly."""
    base = ScopeformerConfig(
        variant="tiny", vit_kind="efficient", n_backbones=2, d=16, layers=2,
        mlp_dim=24, heads=4, attention="mhra", backbone_feature_width=8,
        frozen_fraction=0.0, batch_size=4, epochs=2, learning_rate=1e-3)
    return dataclasses.replace(base, **overrides).validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()
