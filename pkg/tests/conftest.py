import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE = {}


def mnist_dir():
    return os.environ.get("BRNET_DATA_DIR") or str(ROOT / "data" / "mnist")


def have_mnist():
    d = Path(mnist_dir())
    return all((d / n).exists() or (d / (n + ".gz")).exists() for n in (
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not found in {mnist_dir()}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist():
    from brnet.data import load_mnist
    if not have_mnist():
        pytest.skip("MNIST not available")
    return load_mnist(mnist_dir(), "train"), load_mnist(mnist_dir(), "test")


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {key}: {detail}")
