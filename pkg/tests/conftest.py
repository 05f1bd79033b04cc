import numpy as np
import pytest

from flexedit.segmentation import DictProvider
from flexedit.toy import ToyBackend, ToyCodec, sample_image

CAR_BOX = (2, 2, 5, 5)


@pytest.fixture
def backend():
    return ToyBackend(seed=0)


@pytest.fixture
def codec():
    return ToyCodec()


@pytest.fixture
def image():
    return sample_image(0, blob=CAR_BOX)


@pytest.fixture
def car_mask():
    m = np.zeros((8, 8), dtype=np.uint8)
    y0, x0, y1, x1 = CAR_BOX
    m[y0:y1, x0:x1] = 1
    return m


@pytest.fixture
def provider(car_mask):
    return DictProvider({("img", "car"): car_mask, ("img", "parrot"): car_mask})


def relative_error(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b)


ACCEPTANCE = []


def record_acceptance(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
