import numpy as np
import pytest

from focaldet.boxes import BBox


def random_box(rng: np.random.Generator, size: float = 100.0, min_side: float = 1.0) -> BBox:
    x1, y1 = rng.uniform(0, size, 2)
    w, h = rng.uniform(min_side, size / 2, 2)
    return BBox(x1, y1, x1 + w, y1 + h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
