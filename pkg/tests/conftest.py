import numpy as np
import pytest

from hypermpc import autodiff as ad
from hypermpc.dataset import build_dataset, load_manifest
from hypermpc.plant import SimSettings


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six 4-second backlash episodes; enough for fast trainer tests."""
    out = tmp_path_factory.mktemp("tiny_data")
    build_dataset(out, settings=SimSettings(step=1e-4), num_episodes=6, seed=11,
                  duration=4.0, log_fn=None)
    return load_manifest(out)


@pytest.fixture(scope="session")
def tiny_rigid_dataset(tmp_path_factory):
    """Backlash-free episodes whose dynamics the nominal model class matches exactly."""
    out = tmp_path_factory.mktemp("tiny_rigid")
    build_dataset(out, settings=SimSettings(step=1e-4, backlash=0.0, frictionloss=0.0),
                  num_episodes=6, seed=13, duration=4.0, log_fn=None)
    return load_manifest(out)


def finite_difference(f, arrays, eps=1e-6):
    """Central-difference gradients of a scalar function of numpy arrays."""
    grads = []
    for which, arr in enumerate(arrays):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = g.ravel()
        base = [a.copy() for a in arrays]
        for i in range(arr.size):
            hi = [a.copy() for a in base]
            lo = [a.copy() for a in base]
            hi[which].ravel()[i] += eps
            lo[which].ravel()[i] -= eps
            flat[i] = (f(*hi) - f(*lo)) / (2 * eps)
        grads.append(g)
    return grads


def tape_gradients(build, arrays):
    """Evaluate a tape-built scalar loss and its gradients.

    `build(*tensors)` returns the scalar loss tensor.
    """
    tape = ad.Tape()
    with tape:
        tensors = [tape.watch(a) for a in arrays]
        loss = build(*tensors)
    return float(loss.data), tape.gradients(loss, tensors)


def check_gradients(build, arrays, rtol=1e-5, atol=1e-8, eps=1e-6):
    """Assert tape gradients match central finite differences."""
    _, grads = tape_gradients(build, arrays)

    def value(*arrs):
        tape = ad.Tape()
        with tape:
            tensors = [tape.watch(a) for a in arrs]
            return float(build(*tensors).data)

    fds = finite_difference(value, [np.asarray(a, dtype=np.float64) for a in arrays], eps=eps)
    for g, fd in zip(grads, fds):
        np.testing.assert_allclose(g, fd, rtol=rtol, atol=atol)
