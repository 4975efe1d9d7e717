import numpy as np
import pytest

from haarstab.spaces import HaarCoefficients2D


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_vector(rng, lf, ls, terms):
    rows = rng.integers(1, 1 << (lf + 1), size=terms)
    cols = rng.integers(1, 1 << (ls + 1), size=terms)
    return HaarCoefficients2D(lf, ls, rows, cols, rng.standard_normal(terms))


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, title: str, passed: bool, detail: str) -> None:
    line = f"[criterion {criterion:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
