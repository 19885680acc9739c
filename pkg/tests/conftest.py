import numpy as np
import pytest

from skyseg import synth
from skyseg.pipeline import prepare_synthetic


@pytest.fixture(scope="session")
def well_separated():
    """Prepared 7-train/5-test well-separated synthetic set (seed 0)."""
    return prepare_synthetic(synth.generate(0, 7, 5, synth.WELL_SEPARATED))


@pytest.fixture(scope="session")
def noisy_boundary():
    return prepare_synthetic(synth.generate(0, 7, 5, synth.NOISY_BOUNDARY))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.skipped or (report.when == "setup" and report.failed):
        _ACCEPTANCE[name] = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        terminalreporter.write_line(f"criterion {name.split('_')[2]}: {_ACCEPTANCE[name]}  ({name})")
