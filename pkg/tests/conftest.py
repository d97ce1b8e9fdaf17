"""Shared helpers: finite-difference gradients and relative error."""

import numpy as np

from otface import Tensor


def numeric_grad(f, x, eps=1e-4):
    """Central-difference gradient of scalar f at numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grad(build, x0, tol=1e-4, eps=1e-4):
    """build(Tensor) -> scalar Tensor; compares tape grad to central FD."""
    leaf = Tensor(x0, requires_grad=True)
    out = build(leaf)
    out.backward()
    numeric = numeric_grad(lambda arr: build(Tensor(arr)).item(), np.array(x0), eps)
    err = rel_err(leaf.grad, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err
