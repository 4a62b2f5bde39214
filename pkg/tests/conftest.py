import numpy as np
import pytest

from tripod.config import Config


@pytest.fixture
def small_cfg():
    """A narrow model on the default K=13, d=2, 8+8-frame setup."""
    return Config(hidden=12, node_dim=9, joint_embed_dim=6, visual_dim=8, n_classes=5, object_widths=[10, 12],
                  context_dim=4, context_widths=[6, 12], gen_n_samples=3, gen_n_persons=3, gen_context=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
