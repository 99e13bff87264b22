import numpy as np
import pytest

from eotransduce import config, dynamics, pipeline


@pytest.fixture(scope="session")
def default_cfg():
    return config.load(None)


@pytest.fixture(scope="session")
def qc_params():
    return dynamics.QubitCavityParams()


@pytest.fixture(scope="session")
def calibrated_schedule(qc_params):
    amp = dynamics.calibrate_bsb_amplitude(qc_params, 156e-9)
    return dynamics.DriveSchedule(bsb_amplitude=amp)


@pytest.fixture(scope="session")
def sp_envelope(qc_params, calibrated_schedule):
    return dynamics.generate_photon("single", qc_params, calibrated_schedule)


@pytest.fixture(scope="session")
def hp_envelope(qc_params, calibrated_schedule):
    return dynamics.generate_photon("half", qc_params, calibrated_schedule)


@pytest.fixture(scope="session")
def photon_products(default_cfg):
    return pipeline.photon_products(default_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
