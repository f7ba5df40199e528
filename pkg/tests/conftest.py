import numpy as np
import pytest

from ddgen import gscm, trainer
from ddgen.htransformer import ModelConfig


def tiny_model_config(**overrides):
    base = dict(feature_dim=gscm.feature_dim(2), lag=6, window=4, d_model=8,
                heads=2, enc_layers=1, dec_layers=1, ffn_dim=8, rank=3,
                bilstm_hidden=4, bilstm_layers=1, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base).validate()


def random_feature_rows(n_rows, n_paths, seed=0):
    """Synthetic raw rows with the dataset column layout and plausible units."""
    rng = np.random.default_rng(seed)
    rows = np.empty((n_rows, gscm.feature_dim(n_paths)))
    rows[:, 0] = rng.uniform(-400, 400, n_rows)
    rows[:, 1] = rng.uniform(-400, 400, n_rows)
    rows[:, 2] = 1.5
    rows[:, 3] = rng.uniform(-130, -90, n_rows)
    rows[:, gscm.path_id_cols(n_paths)] = np.arange(1, n_paths + 1)
    rows[:, gscm.gain_cols(n_paths)] = rng.uniform(-140, -90, (n_rows, n_paths))
    rows[:, gscm.delay_cols(n_paths)] = rng.uniform(300, 4000, (n_rows, n_paths))
    for cols in (gscm.az_dod_cols, gscm.zn_dod_cols, gscm.az_doa_cols,
                 gscm.zn_doa_cols):
        rows[:, cols(n_paths)] = rng.uniform(-180, 180, (n_rows, n_paths))
    return rows


@pytest.fixture(scope="session")
def small_dataset():
    return gscm.synthesize_dataset(n_paths=3, steps=120, seed=42, fc_ghz=2.4,
                                   delta2d=1.0, trajectories=2)


@pytest.fixture(scope="session")
def small_scaler(small_dataset):
    return trainer.fit_scaler(small_dataset.rows, small_dataset.n_paths)
