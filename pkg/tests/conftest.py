import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mde_harden.assets import make_car_asset
from mde_harden.geometry import Intrinsics
from mde_harden.models import DepthNet
from mde_harden.scenes import SyntheticSceneSpec, generate_scenes

settings.register_profile("repo", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def spec():
    return SyntheticSceneSpec()


@pytest.fixture(scope="session")
def scenes(spec):
    return generate_scenes(spec, 6, seed=0)


@pytest.fixture(scope="session")
def asset():
    return make_car_asset()


@pytest.fixture(scope="session")
def K(spec):
    return spec.intrinsics


@pytest.fixture
def tiny_net():
    return DepthNet(widths=(4, 4, 4, 4, 4), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def square_K():
    return Intrinsics(100.0, 100.0, 64.0, 32.0, 128, 64)


ACCEPTANCE = []


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` prints one verdict line and records it for the summary."""
    def record(n, ok, detail=""):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
