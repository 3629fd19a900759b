from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from safeens.config import smoke_config
from safeens.sim import WorldConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_FAMILIES = {"A": {"embed_seed": 11, "rays_per_view": 4, "embed_dim": 6},
                  "B": {"embed_seed": 29, "rays_per_view": 5, "embed_dim": 8}}


@pytest.fixture(scope="session")
def small_world():
    return WorldConfig(horizon=16, n_views=3, rays_per_view=4, embed_dim=6)


@pytest.fixture(scope="session")
def small_data(small_world):
    """Two regimes, mixed policies; contains collisions and both label classes."""
    data = generate_dataset(small_world, [0, 3], 6, SMALL_FAMILIES, seed=3, avoiding_fraction=0.3)
    assert data.label_counts["collisions"] > 0
    return data


@pytest.fixture(scope="session")
def smoke_run():
    """In-memory smoke-scale pipeline, shared by the ensemble, evaluation and filtering tests."""
    from safeens import pipeline as P

    return P.run_pipeline(smoke_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
