import numpy as np
import pytest

from binrep import synth


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist_like")
    synth.make_mnist_like(str(d), n_train=600, n_test=150, seed=0)
    return str(d)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cifar_like")
    synth.make_cifar10_like(str(d), n_train=400, n_test=100, seed=0)
    return str(d)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at flat array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a)
    b = np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
