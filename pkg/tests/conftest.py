import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from talksplat import diffcore as dc
from talksplat.synthdata import SceneSpec, generate, load

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def double():
    with dc.precision("double"):
        yield


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """A short, quick-to-train sequence shared by the unit tests."""
    out = tmp_path_factory.mktemp("small")
    generate(SceneSpec(seed=3, frames=240), out)
    return load(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
