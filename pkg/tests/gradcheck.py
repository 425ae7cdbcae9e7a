"""Central finite-difference gradient checking shared by the test suite."""

import numpy as np

FD_H = 1e-6
REL_TOL = 1e-5


def fd_grad(f, x, h=FD_H):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grad_close(analytic, numeric, context=""):
    scale = max(float(np.linalg.norm(numeric)), 1.0)
    err = float(np.linalg.norm(analytic - numeric)) / scale
    assert err <= REL_TOL, f"{context}: relative gradient error {err:.3e}"
