"""Central finite-difference oracle, independent of the tape engine."""

import numpy as np


def finite_diff_grads(forward, tensors, h=1e-5):
    """Numerical gradient of a scalar forward() w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = forward()
            flat[i] = orig - h
            fm = forward()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def assert_grads_close(forward, tensors, analytic_grads, tol=1e-4, h=1e-5):
    numeric = finite_diff_grads(forward, tensors, h=h)
    for t, a, n in zip(tensors, analytic_grads, numeric):
        err = max_rel_err(a, n)
        assert err <= tol, f"gradient mismatch for shape {t.data.shape}: rel err {err:.3e}"
