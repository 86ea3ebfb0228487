import gzip

import numpy as np
import pytest

from eae.datasets import write_idx
from eae.networks import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_ae():
    return build_model(5, 2, (4,), (4,), activation="elu")


@pytest.fixture
def small_vae():
    return build_model(5, 2, (4,), (4,), activation="elu", variational=True)


def fabricate_mnist(directory, n=300, seed=0, gz=True):
    """Write IDX files with blocky random "digits" and labels 0..9."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.zeros((n, 28, 28), dtype=np.uint8)
    for i, lab in enumerate(labels):
        r, c = divmod(int(lab), 4)
        images[i, 4 + 6 * r : 10 + 6 * r, 3 + 6 * c : 9 + 6 * c] = 255
        images[i] = np.clip(images[i] + rng.integers(0, 40, size=(28, 28)), 0, 255)
    img = directory / "train-images-idx3-ubyte"
    lab = directory / "train-labels-idx1-ubyte"
    write_idx(img, lab, images, labels)
    if gz:
        for p in (img, lab):
            p.with_name(p.name + ".gz").write_bytes(gzip.compress(p.read_bytes(), mtime=0))
    return images, labels


@pytest.fixture
def mnist_dir(tmp_path, monkeypatch):
    d = tmp_path / "data"
    d.mkdir()
    fabricate_mnist(d, n=2000)
    monkeypatch.setenv("EAE_DATA_DIR", str(d))
    return d


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Record one line per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, passed, text):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {text}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
