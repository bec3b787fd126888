import random

import numpy as np
import pytest

from p4l import he


@pytest.fixture(scope="session")
def keys512():
    return he.keygen(512, random.Random(1), unsafe=True)


@pytest.fixture(scope="session")
def keys1024():
    return he.keygen(1024, random.Random(2), unsafe=True)


@pytest.fixture
def codec():
    return he.FixedPointCodec()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed at the end of the session
_CRITERIA: list[str] = []


@pytest.fixture
def criterion(capsys):
    """``criterion(n, ok, detail)`` records a pass/fail line, then asserts ``ok``."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
