"""Shared test utilities: finite differences and random instance builders."""

import numpy as np

from mmcl import KernelSpec, build_instance


def rel_err(a, b, floor=1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def central_diff(f, x, h=1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def unit_columns(rng, d, n) -> np.ndarray:
    X = rng.standard_normal((d, n))
    return X / np.linalg.norm(X, axis=0, keepdims=True)


def random_instance(rng, n, C=100.0, beta=0.1, sigma_sq=None, d=8):
    """Random reduced-dual instance from unit embeddings and an RBF kernel."""
    if sigma_sq is None:
        sigma_sq = float(rng.uniform(0.25, 4.0))
    spec = KernelSpec(kind="rbf", sigma_sq=sigma_sq)
    z_pos = unit_columns(rng, d, 1)[:, 0]
    Z_neg = unit_columns(rng, d, n)
    return build_instance(spec, z_pos, Z_neg, C, beta)


def rotated_spectrum_delta(rng, eigenvalues) -> np.ndarray:
    """Symmetric matrix with the given spectrum under a random rotation."""
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    n = eigenvalues.size
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * eigenvalues) @ Q.T
