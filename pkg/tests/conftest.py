import numpy as np
import pytest

from wgeig.assembly import assemble_forms
from wgeig.mesh import build_unit_square
from wgeig.polyspace import WgSpace


def random_weak_function(space, rng):
    from wgeig.polyspace import WeakFunction
    return WeakFunction(space, rng.standard_normal(space.ndof))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_forms():
    """Forms on a 4x4 mesh for k = 1, 2 at eps = 0.1, keyed by k."""
    mesh = build_unit_square(4)
    return {k: assemble_forms(WgSpace(mesh, k), 0.1) for k in (1, 2)}


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_log(request):
    """Record one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, line):
        lines[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
