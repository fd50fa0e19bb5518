import numpy as np
import pytest

from lbgm.estimator import FitOptions, fit
from lbgm.simstudy import WAVES_6, generate_dataset, replication_rng, benchmark_design


def small_design(n=200, rho=0.3, fixed="first", missing_z=()):
    return benchmark_design(n=n, wave_times=WAVES_6, rho_between=rho, fixed_interval=fixed,
                         missing_z=missing_z)


@pytest.fixture(scope="session")
def small_sample():
    sample, truth = generate_dataset(small_design(), replication_rng(11, 0))
    return sample, truth


@pytest.fixture(scope="session")
def small_fit(small_sample):
    sample, _ = small_sample
    spec = small_design().model_spec()
    return fit(sample, spec, FitOptions())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
