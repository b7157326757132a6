import numpy as np
import pytest

from rmlsmc.models import ou_problem, simulate_ou_data
from rmlsmc.util import stream

OU_THETA = np.zeros(2)
OU_DATA_SEED = 7


@pytest.fixture(scope="session")
def ou_data():
    """Fixed n=5 OU data set (gamma=1, theta=(0,0), x0=0)."""
    return simulate_ou_data(OU_THETA, 5, stream(OU_DATA_SEED, "data"))


@pytest.fixture(scope="session")
def ou_prob(ou_data):
    return ou_problem(ou_data)


def assert_within_se(mean, truth, se, n_se, label=""):
    z = (mean - truth) / se
    assert abs(z) <= n_se, (f"{label} mean {mean} vs truth {truth}: "
                            f"|z| = {abs(z):.2f} > {n_se} (se {se:.3e})")
