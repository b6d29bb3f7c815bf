import numpy as np
import pytest

from wattnet.data import make_synthetic, prepare_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_32():
    """Prepared 500-image synthetic set at 32x32."""
    return prepare_dataset(make_synthetic(500, 32, seed=0), 32)



def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
