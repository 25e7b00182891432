import numpy as np
import pytest

from multid2 import models
from multid2.ensemble import ConnectivityPartition, EnsembleState


def random_state(rng, N_S, M, N, scale=0.7, t=0.0):
    A = rng.normal(size=(N_S, M)) + 1j * rng.normal(size=(N_S, M))
    F = scale * (rng.normal(size=(M, N)) + 1j * rng.normal(size=(M, N)))
    return EnsembleState(A, F, ConnectivityPartition.trivial(M, N), t)


def random_model(rng, N_S, N):
    h = rng.normal(size=(N_S, N_S)) + 1j * rng.normal(size=(N_S, N_S))
    kappa = rng.normal(size=(N_S, N)) + 1j * rng.normal(size=(N_S, N))
    omega = rng.uniform(0.3, 1.5, size=N)
    return models.ModelSpec(0.5 * (h + h.conj().T), 0.4 * kappa, omega)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def sb_small():
    """Spin-boson model with two discretized modes."""
    return models.spin_boson_spec(models.SpinBosonParams(alpha=0.1, N=2))


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
