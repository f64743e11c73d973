import numpy as np
import pytest

from cattraj.model import DriveSpec, SystemModel, Waveform

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
SIGMA_MINUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)  # |0><1|


@pytest.fixture
def qubit():
    """Decaying qubit with H = sigma_z / 2, L = sigma^-."""
    return SystemModel(2, 0.5 * SIGMA_Z, SIGMA_MINUS)


@pytest.fixture
def excited():
    return np.array([0.0, 1.0], dtype=complex)


@pytest.fixture
def cat_drive():
    """Even cat drive of constant amplitude 0.5 on horizon 2."""
    return DriveSpec.even_cat(Waveform.constant(0.5, 2.0))


def random_complex_matrix(rng, n, m=None):
    m = n if m is None else m
    return rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m))
