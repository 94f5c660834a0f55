import numpy as np
import pytest

from jlml.model import toy_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides):
    """Smallest network that still has every structural element."""
    base = dict(
        input_size=(16, 16),
        stem_channels=2,
        stage_widths_global=((2, 2, 3), (2, 2, 3), (2, 2, 4), (2, 2, 4)),
        stage_widths_local=((1, 1, 2), (1, 2, 2), (1, 1, 2), (2, 1, 2)),
        blocks_per_stage=1,
        m=2,
        feat_dim_global=3,
        feat_dim_local=3,
        n_id=3,
    )
    base.update(overrides)
    return toy_config(**base)
