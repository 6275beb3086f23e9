"""Shared test utilities: finite differences and error norms."""

import numpy as np


def central_difference(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f at x, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def relative_error(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) < 1e-8:
        # both effectively zero (e.g. a structurally absent dependency)
        return 0.0
    return np.linalg.norm(a - b) / max(na, nb, floor)
