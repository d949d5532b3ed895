from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"
CONFIGS = ROOT / "configs"


def mnist_paths():
    return {
        "train_images": str(MNIST_DIR / "train-images-idx3-ubyte.gz"),
        "train_labels": str(MNIST_DIR / "train-labels-idx1-ubyte.gz"),
        "test_images": str(MNIST_DIR / "test-images-idx3-ubyte.gz"),
        "test_labels": str(MNIST_DIR / "test-labels-idx1-ubyte.gz"),
    }


@pytest.fixture
def rng():
    from nsfx.numerics import Rng
    return Rng(1234)


@pytest.fixture(scope="session")
def mnist_available():
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST IDX files not present")
    return mnist_paths()


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
