import numpy as np
import pytest


def random_spd(rng: np.random.Generator, p: int, spread: float = 1.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues roughly in [e^-spread, e^spread]."""
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    w = np.exp(rng.uniform(-spread, spread, size=p))
    return (q * w) @ q.T


def random_sym(rng: np.random.Generator, p: int, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((p, p)) * scale
    return 0.5 * (a + a.T)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20260816)
