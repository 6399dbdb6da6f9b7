"""Central finite-difference oracles shared across gradient tests."""

import numpy as np


def fd_gradient(f, x0, h=1e-5):
    """Central-difference gradient of scalar f at flat vector x0."""
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-5, abs_small=1e-7, small_mag=1e-2):
    """Per-coordinate check: relative tolerance, absolute where tiny."""
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    assert analytic.shape == numeric.shape
    for a, n in zip(analytic, numeric):
        if max(abs(a), abs(n)) < small_mag:
            assert abs(a - n) <= abs_small, f"analytic={a} fd={n}"
        else:
            denom = max(abs(a), abs(n))
            assert abs(a - n) / denom <= rel, f"analytic={a} fd={n}"
