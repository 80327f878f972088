"""Shared test helpers: finite-difference oracles and corpus builders."""

import numpy as np
import pytest
from hypothesis import settings

from gradshift.autodiff import Tape

settings.register_profile("ci", max_examples=50, derandomize=True,
                          deadline=None)
settings.load_profile("ci")

FD_STEP = 1e-5
FD_RTOL = 1e-4


def finite_difference(f, arrays, step=FD_STEP):
    """Central finite-difference gradients of scalar f w.r.t. each array."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.ravel()
        for i in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].ravel()[i] += step
            minus[k].ravel()[i] -= step
            flat[i] = (f(*plus) - f(*minus)) / (2.0 * step)
        grads.append(g)
    return grads


def assert_close_rel(analytic, numeric, rtol=FD_RTOL, floor=1e-6):
    """Relative comparison with an absolute floor for near-zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / denom
    assert err.max() <= rtol, f"max relative error {err.max():.3e} > {rtol}"


def check_gradients(build, arrays, rtol=FD_RTOL):
    """Compare tape gradients of build(tape, leaves)->root against FD.

    build must be a pure function of the leaf values; arrays are the leaf
    payloads (each gets requires_grad=True).
    """
    tape = Tape()
    leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
    root = build(tape, leaves)
    grads = tape.backward(root)

    def scalar(*vals):
        t2 = Tape()
        l2 = [t2.leaf(v) for v in vals]
        return float(build(t2, l2).value)

    numeric = finite_difference(scalar, [np.asarray(a, dtype=np.float64)
                                         for a in arrays])
    for leaf, num in zip(leaves, numeric):
        assert_close_rel(grads[leaf.id], num, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
