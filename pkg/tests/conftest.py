import numpy as np
import pytest

from cavfem.energy import MaterialModel
from cavfem.meshgen import MeshConfig, build_mesh, build_schedule
from cavfem.radial import solve_radial

REF_HS = (0.06, 0.04, 0.03, 0.02, 0.01)


@pytest.fixture(scope="session")
def material():
    return MaterialModel()


@pytest.fixture(scope="session")
def profiles(material):
    """Radial reference profiles for the two cavity radii, lambda = 2."""
    return {e: solve_radial(material, e, 2.0, 2048) for e in (0.01, 1e-4)}


@pytest.fixture(scope="session")
def mesh_cache():
    store = {}

    def get(eps0, h, **kw):
        key = (eps0, h, tuple(sorted(kw.items())))
        if key not in store:
            store[key] = build_mesh(build_schedule(MeshConfig(eps0, h, **kw)))
        return store[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
