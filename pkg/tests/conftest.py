import numpy as np
import pytest

from robinshape.geometry import Circle, boundary_from_name, sample_boundary
from robinshape.mesh import triangulate_annulus
from robinshape.synth import default_catalog, synthesize

ALPHA = 1.0
RHO = 0.5
# radial solution u = 1 + B ln r of the unit-Dirichlet problem with Robin at r = 0.5
B_RADIAL = 1.0 / (2.0 - np.log(0.5))


@pytest.fixture(scope="session")
def unit_circle():
    return sample_boundary(Circle((0.0, 0.0), 1.0), 400)


@pytest.fixture(scope="session")
def kite():
    return sample_boundary(boundary_from_name("kite"), 400)


@pytest.fixture(scope="session")
def peanut():
    return sample_boundary(boundary_from_name("peanut"), 400)


@pytest.fixture(scope="session")
def circle03():
    return sample_boundary(Circle((0.0, 0.0), 0.3), 200)


@pytest.fixture(scope="session")
def radial_mesh_factory(unit_circle):
    inner = sample_boundary(Circle((0.0, 0.0), RHO), 400)
    cache = {}

    def make(h):
        if h not in cache:
            cache[h] = triangulate_annulus(unit_circle, inner, h)
        return cache[h]

    return make


@pytest.fixture(scope="session")
def kite_data_N(kite, unit_circle):
    return synthesize(kite, unit_circle, ALPHA, default_catalog("N", 4), "N")


@pytest.fixture(scope="session")
def kite_data_D(kite, unit_circle):
    return synthesize(kite, unit_circle, ALPHA, default_catalog("D", 4), "D")


@pytest.fixture(scope="session")
def kite_mesh(kite, unit_circle):
    return triangulate_annulus(unit_circle, kite, 0.03)


@pytest.fixture(scope="session")
def start_mesh(circle03, unit_circle):
    return triangulate_annulus(unit_circle, circle03, 0.03)


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(n, ok, detail) prints and stores it."""

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        request.config.stash[_CRITERIA][n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
