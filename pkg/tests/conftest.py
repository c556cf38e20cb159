import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lcoupling.geometry import FlowManifold

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def torus():
    return FlowManifold.flat_torus(2, [4.0, 4.0], 1.0, 8.0)


@pytest.fixture
def sphere():
    return FlowManifold.round_sphere(2, 1.0, 1.0, 8.0)


@pytest.fixture
def hyperbolic():
    return FlowManifold.hyperbolic(2, 30.0, 1.0, 8.0)


@pytest.fixture
def product():
    return FlowManifold.sphere_torus(2, 1, 1.0, [2.0], 1.0, 8.0)


ALL_FLOWS = {
    "torus": lambda: FlowManifold.flat_torus(2, [4.0, 4.0], 1.0, 8.0),
    "sphere": lambda: FlowManifold.round_sphere(2, 1.0, 1.0, 8.0),
    "sphere3": lambda: FlowManifold.round_sphere(3, 1.5, 1.0, 8.0),
    "hyperbolic": lambda: FlowManifold.hyperbolic(2, 30.0, 1.0, 8.0),
    "hyperbolic3": lambda: FlowManifold.hyperbolic(3, 40.0, 1.0, 8.0),
    "product": lambda: FlowManifold.sphere_torus(2, 1, 1.0, [2.0], 1.0, 8.0),
}


@pytest.fixture(params=sorted(ALL_FLOWS))
def any_flow(request):
    return ALL_FLOWS[request.param]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_collection_modifyitems(config, items):
    # acceptance criteria run after every other test, the audit criterion last
    def key(item):
        if "test_acceptance" not in item.nodeid:
            return 0
        return 2 if "c11" in item.name else 1
    items.sort(key=key)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
