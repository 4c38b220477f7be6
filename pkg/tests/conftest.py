import numpy as np
import pytest

from forge.ansatz import GridSpec, build_stack
from forge.core import derive_params
from forge.geometry import Hypersurface, InfluenceRegion, LorentzGraphMap, build_bundle
from forge.solver import SolverConfig, solve

ACCEPTANCE_LINES: dict = {}


def record(num: int, ok: bool, detail: str):
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[num] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def p13():
    return derive_params(1, 3)


@pytest.fixture(scope="session")
def flat_bundle(p13):
    return build_bundle(Hypersurface.zero(1), p13)


@pytest.fixture(scope="session")
def flat_stack(p13, flat_bundle):
    return build_stack(p13, flat_bundle)


@pytest.fixture(scope="session")
def refined_s_stack(p13, flat_bundle):
    return build_stack(p13, flat_bundle, GridSpec(per_decade=128), levels=2)


@pytest.fixture(scope="session")
def small_stack(p13, flat_bundle):
    """Two levels on a coarse grid, for quick structural tests."""
    return build_stack(p13, flat_bundle, GridSpec(h=0.01, s_min=1e-3, per_decade=32), levels=2)


@pytest.fixture(scope="session")
def solves(flat_stack):
    out = {}
    for n in (100, 200):
        cfg = SolverConfig(n=n)
        out[n] = (cfg,) + solve(cfg, flat_stack)
    return out


@pytest.fixture(scope="session")
def pullback_setup(p13, flat_bundle, flat_stack):
    region = InfluenceRegion(flat_bundle, 0.12)
    lmap = LorentzGraphMap(flat_bundle, region.tau0)
    traj, _ = solve(SolverConfig(n=1000), flat_stack)
    return region, lmap, traj


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
