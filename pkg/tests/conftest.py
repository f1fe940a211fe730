import numpy as np
import pytest

from splatlbo import laplacian, shapes, spectral


@pytest.fixture(scope="session")
def icosphere():
    return shapes.icosphere(4)


@pytest.fixture(scope="session")
def icosphere_lap(icosphere):
    return laplacian.mesh_laplacian(icosphere)


@pytest.fixture(scope="session")
def icosphere3():
    return shapes.icosphere(3)


@pytest.fixture(scope="session")
def icosphere3_lap(icosphere3):
    return laplacian.mesh_laplacian(icosphere3)


@pytest.fixture(scope="session")
def grid50():
    return shapes.grid_mesh(50)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def icosphere_spectrum(icosphere_lap):
    return spectral.smallest_eigenpairs(icosphere_lap, 16)


# ---------------------------------------------------------------------------
# one PASS/FAIL line per exit criterion

_CRITERIA = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None and marker.args:
        name = marker.args[0]
        ok = _CRITERIA.get(name, True)
        if report.when == "call" or report.failed:
            _CRITERIA[name] = ok and not report.failed
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _CRITERIA.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}")
