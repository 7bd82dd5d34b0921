from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"
REPO = Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def mnist_source(tmp_dir: Path) -> Path:
    """Directory holding MNIST IDX files.

    Uses ``data/mnist`` in the repository when real files are present;
    otherwise writes the 5,000-digit MNIST subset bundled with mlxtend as
    IDX files (500 digits per class) and returns that directory.
    """
    real = REPO / "data" / "mnist"
    if (real / "train-images-idx3-ubyte").exists() or (real / "train-images-idx3-ubyte.gz").exists():
        return real
    mlx = pytest.importorskip("mlxtend.data")
    from dirnet.data_io import write_idx_images, write_idx_labels

    x, y = mlx.mnist_data()
    tmp_dir.mkdir(parents=True, exist_ok=True)
    write_idx_images(tmp_dir / "train-images-idx3-ubyte", x.reshape(-1, 28, 28).astype(np.uint8))
    write_idx_labels(tmp_dir / "train-labels-idx1-ubyte", y.astype(np.uint8))
    return tmp_dir


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    return mnist_source(tmp_path_factory.mktemp("mnist"))


_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
