import sys

import pytest

from partstyle import fixtures


@pytest.fixture(scope="session")
def cube_mesh():
    return fixtures.unit_cube_mesh()


@pytest.fixture(scope="session")
def spheres():
    return fixtures.two_spheres()


@pytest.fixture(scope="session")
def body_handle():
    return fixtures.body_handle()


@pytest.fixture(scope="session")
def lamp():
    return fixtures.lamp()


@pytest.fixture(scope="session")
def one_sphere():
    return fixtures.assemble({"body": fixtures.uv_sphere(1.0, n_lat=8, n_lon=16)})



def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
