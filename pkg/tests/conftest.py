import numpy as np
import pytest

from implicitreg.numerics import Rng


@pytest.fixture
def rng():
    return Rng(12345)


def naive_forward(U, V, x):
    H, d = U.shape
    k = V.shape[1]
    y = [0.0] * k
    for h in range(H):
        z = 0.0
        for i in range(d):
            z += U[h, i] * x[i]
        a = z if z > 0 else 0.0
        for j in range(k):
            y[j] += V[h, j] * a
    return np.array(y)


_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
