import os
from pathlib import Path

import numpy as np
import pytest

from tcri.scm import load_mnist, write_idx


def _official_dir() -> Path | None:
    d = os.environ.get("TCRI_MNIST_DIR")
    if d and (Path(d) / "train-images-idx3-ubyte").exists():
        return Path(d)
    return None


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory) -> Path:
    """Directory with MNIST training IDX files.

    Uses ``$TCRI_MNIST_DIR`` when it holds the official files, otherwise the
    5000-digit sample bundled with mlxtend written out as IDX.
    """
    official = _official_dir()
    if official is not None:
        return official
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    d = tmp_path_factory.mktemp("mnist")
    write_idx(d / "train-images-idx3-ubyte", X.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(d / "train-labels-idx1-ubyte", y.astype(np.uint8))
    return d


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    return load_mnist(mnist_dir)


@pytest.fixture(scope="session")
def official_mnist_dir():
    d = _official_dir()
    if d is None:
        pytest.skip("official MNIST files not available (set TCRI_MNIST_DIR)")
    return d


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Callable recording one PASS/FAIL line per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
