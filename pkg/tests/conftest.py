import numpy as np
import pytest

from selfkp import model as mdl
from selfkp import synthdata as sd


@pytest.fixture(scope="session")
def tiny_model():
    """Smallest valid model, shared across tests that only need shapes."""
    config = mdl.ModelConfig(c_enc=8, descriptor_dim=8, num_classes=3,
                             widths=(4, 4, 8, 8), head_hidden=8)
    return mdl.init_params(config, np.random.default_rng(0))


@pytest.fixture(scope="session")
def desk_model():
    return mdl.init_params(mdl.ModelConfig.desk(), np.random.default_rng(0))


@pytest.fixture(scope="session")
def scene_sample():
    return sd.render_scene(sd.SceneConfig(), np.random.default_rng(11), seed=11)
