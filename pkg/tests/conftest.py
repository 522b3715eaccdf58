import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("logz", deadline=None, max_examples=60)
settings.load_profile("logz")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class ZeroPotential:
    """f = 0 with the interface samplers need; used for exact OU checks."""

    def __init__(self, d, L=1.0):
        self.d, self.L, self.mu = d, L, L

    @property
    def kappa(self):
        return 1.0

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])


@pytest.fixture
def zero_potential():
    return ZeroPotential


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(num, name, ok, detail=""):
        line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}: {name}" + (f" [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append((num, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
