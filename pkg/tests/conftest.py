import numpy as np
import pytest

from anisoflow.mesh import generate_rect_mesh

SQUARE_MSH = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
2
1 2 2 0 1 1 2 3
2 2 2 0 1 1 3 4
$EndElements
"""


@pytest.fixture
def square_msh(tmp_path):
    path = tmp_path / "square.msh"
    path.write_text(SQUARE_MSH)
    return path


@pytest.fixture(scope="session")
def mesh_coarse():
    return generate_rect_mesh(1.0, 1.0, 0.02)


@pytest.fixture(scope="session")
def mesh_fine():
    return generate_rect_mesh(1.0, 1.0, 6e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# --------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per criterion, printed after the run

ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """``report(number, passed, detail)`` records and prints one acceptance line."""

    def _report(number, passed: bool, detail: str) -> str:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        return line

    return _report
