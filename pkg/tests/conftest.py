import numpy as np
import pytest
import torch

from medpeft.mednext_backbone import ModelConfig
from medpeft.synthetic_cohort import CohortSpec, Domain, generate_case
from medpeft.volume_io import z_normalize

torch.set_num_threads(2)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(in_channels=2, n_classes=3, base_channels=4,
                       n_levels=3, blocks_per_stage=2)


@pytest.fixture(scope="session")
def mini_cases():
    """Four preprocessed source-domain cases at 16^3 (shared, read-only)."""
    spec = CohortSpec(n_cases=4, spatial_shape=(16, 16, 16),
                      domain=Domain.SOURCE, rng_seed=1)
    return [tuple([z_normalize(v), m])
            for v, m in (generate_case(spec, i) for i in range(4))]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_mask(rng, shape=(10, 10, 10), p=0.3):
    return rng.random(shape) < p
