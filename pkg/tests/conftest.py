import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bohmvel import sampler  # noqa: E402
from bohmvel.scenario import build_double_slit  # noqa: E402
from bohmvel.wavecore import ProtocolParams, WavePacket  # noqa: E402

# reference configuration with the weak detector dominating the spread of
# x_s - x_w: one broad, slow Gaussian
BROAD_SIGMA0 = 1e-6
BROAD_PARAMS = ProtocolParams(tau=1e-12, sigma_w=100e-9, sigma_s=1e-9)
ENSEMBLE_SIZE = 100_000
ENSEMBLE_SEED = 20240611


@pytest.fixture(scope="session")
def slit():
    """Calibrated double slit with tau = 1 ps, sigma_w = 150 nm, sigma_s = 0.2 nm."""
    return build_double_slit()


@pytest.fixture(scope="session")
def slit_psi_w(slit):
    return slit.state_at_weak()


@pytest.fixture(scope="session")
def slit_psi_s(slit):
    return slit.state_at_sharp()


@pytest.fixture(scope="session")
def broad_psi():
    return WavePacket.gaussian(0.0, BROAD_SIGMA0)


@pytest.fixture(scope="session")
def broad_params():
    return BROAD_PARAMS


@pytest.fixture(scope="session")
def broad_ensemble(broad_psi):
    """10^5 measurement records on the broad Gaussian, shared by the statistical tests."""
    return sampler.run_ensemble(broad_psi, BROAD_PARAMS, ENSEMBLE_SIZE, ENSEMBLE_SEED)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
