import numpy as np
import pytest

from gridflow.dataset import stack_windows, windows_from_sequences
from gridflow.grid import GridGeometry
from gridflow.model import NetConfig
from gridflow.scene import SensorNoise, random_scenario, simulate

TINY = NetConfig(base_features=4, n_convlstm_layers=2, latent_dim=2, n_gru_units=2, horizon=4, n_input=3)


def tiny_windows(n_scenes=3, size=12, cell=1.0, noise=SensorNoise(0.02, 0.2), dtype=np.float64, seed0=0):
    g = GridGeometry(size, size, cell)
    seqs = [simulate(random_scenario(seed0 + s, geometry=g, sensor_noise=noise)) for s in range(n_scenes)]
    return windows_from_sequences(seqs)


@pytest.fixture(scope="session")
def tiny_data():
    w = tiny_windows()
    X, Y = stack_windows(w, np.float64)
    return X, Y, w
