import numpy as np
import pytest

from bimonn import _kernels


def numerical_grad(f, arr, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of arr (perturbed in place)."""
    arr = np.asarray(arr)
    grad = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(params=sorted(_kernels.BACKENDS))
def backend(request):
    previous = _kernels.BACKEND
    _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(previous)


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """IDX image file with the 5000 MNIST digits bundled in mlxtend."""
    data = pytest.importorskip("mlxtend.data")
    from bimonn.datasets import write_idx_images

    x, _ = data.mnist_data()
    path = tmp_path_factory.mktemp("mnist") / "train-images-idx3-ubyte"
    write_idx_images(path, x.reshape(-1, 28, 28).astype(np.uint8))
    return path


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
