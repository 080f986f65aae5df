import numpy as np
import pytest

from survfuse.config import EvalConfig, ModelConfig, RunConfig, TrainConfig
from survfuse.data_io import write_cohort
from survfuse.synthetic import EffectWeights, gen_synthetic

SMALL_TOML = """\
[model]
proj_dim = 8
attn_dim = 4
snn_hidden = 8
rep_dim = 4
fusion_hidden = 8

[train]
epochs = 1
lr = 0.001

[eval]
n_folds = 3
bootstrap_replicates = 20
"""


@pytest.fixture
def rng():
    return np.random.default_rng(8525)


@pytest.fixture
def small_model_config():
    return ModelConfig(
        proj_dim=8, attn_dim=6, snn_hidden=8, rep_dim=4, fusion_hidden=8
    )


@pytest.fixture
def fast_config(small_model_config):
    return RunConfig(
        model=small_model_config,
        train=TrainConfig(epochs=2, lr=1e-3, seed=11),
        eval=EvalConfig(n_folds=3, bootstrap_replicates=20),
    )


@pytest.fixture(scope="session")
def cohort():
    """60 patients, bags of 6 patches, d = 4, p = 8"""
    return gen_synthetic(60, 6, 4, 8, EffectWeights(0.5, 0.5, 1.0), 0.3, seed=3)


@pytest.fixture
def datadir(tmp_path, cohort):
    path = tmp_path / "data"
    write_cohort(cohort, path)
    return path


@pytest.fixture
def small_toml(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return path
