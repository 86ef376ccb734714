"""RKHS kernels, Gram matrices, and their analytic input gradients.

Three kernel families are supported:

* ``linear``:  k(a, b) = a.b
* ``rbf``:     k(a, b) = exp(-||a - b||^2 / (2 sigma_sq))
* ``tanh``:    k(a, b) = tanh(-gamma * a.b + bias), with an optional switch
  to flip the slope to +gamma (the default sign makes similarity decrease
  in a.b, which is unusual but is the documented behaviour).

All math is done in double precision. Gram matrices are computed exactly,
with the RBF squared distance expanded as ||a||^2 + ||b||^2 - 2 a.b and
clamped at zero to avoid tiny negative round-off before exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KERNEL_KINDS = ("linear", "rbf", "tanh")


@dataclass(frozen=True)
class KernelSpec:
    """Which kernel to evaluate and its hyperparameters.

    ``sigma_sq`` is the RBF bandwidth (must be positive for rbf),
    ``gamma`` and ``bias`` parameterize the tanh kernel. ``positive_gamma``
    flips the tanh slope from the default -gamma to +gamma.
    """

    kind: str = "rbf"
    sigma_sq: float = 1.0
    gamma: float = 1.0
    bias: float = 0.0
    positive_gamma: bool = False

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "rbf" and not self.sigma_sq > 0:
            raise ValueError(f"rbf kernel requires sigma_sq > 0, got {self.sigma_sq}")


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {v.shape}")
    return v


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def _tanh_slope(spec: KernelSpec) -> float:
    return spec.gamma if spec.positive_gamma else -spec.gamma


def kernel_eval(spec: KernelSpec, a, b) -> float:
    """Evaluate k(a, b) for two vectors of equal dimension."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    _check_same_dim(a, b)
    if spec.kind == "linear":
        return float(a @ b)
    if spec.kind == "rbf":
        sq = float(a @ a) + float(b @ b) - 2.0 * float(a @ b)
        return float(np.exp(-max(sq, 0.0) / (2.0 * spec.sigma_sq)))
    return float(np.tanh(_tanh_slope(spec) * float(a @ b) + spec.bias))


def gram(spec: KernelSpec, A, B) -> np.ndarray:
    """Pairwise kernel matrix between the columns of A (d x m) and B (d x n).

    Entry (i, j) is ``kernel_eval(spec, A[:, i], B[:, j])``. For the linear
    and rbf kinds, ``gram(spec, A, A)`` is symmetric positive semidefinite.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError(f"A and B must be 2-d (columns are points), got {A.shape} and {B.shape}")
    _check_same_dim(A, B)
    inner = A.T @ B
    if spec.kind == "linear":
        return inner
    if spec.kind == "rbf":
        sq = np.sum(A * A, axis=0)[:, None] + np.sum(B * B, axis=0)[None, :] - 2.0 * inner
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-sq / (2.0 * spec.sigma_sq))
    return np.tanh(_tanh_slope(spec) * inner + spec.bias)


def kernel_grad(spec: KernelSpec, a, b) -> np.ndarray:
    """Gradient of k(a, b) with respect to the second argument b.

    linear: a
    rbf:    k(a, b) * (a - b) / sigma_sq
    tanh:   slope * (1 - tanh(slope * a.b + bias)^2) * a
    """
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    _check_same_dim(a, b)
    if spec.kind == "linear":
        return a.copy()
    if spec.kind == "rbf":
        return kernel_eval(spec, a, b) * (a - b) / spec.sigma_sq
    s = _tanh_slope(spec)
    t = np.tanh(s * float(a @ b) + spec.bias)
    return s * (1.0 - t * t) * a


def grad_wrt_second(spec: KernelSpec, A, b) -> np.ndarray:
    """Column i is the gradient of k(A[:, i], b) with respect to b.

    Vectorized form of ``kernel_grad`` over the columns of A (d x m);
    returns a d x m matrix.
    """
    A = np.asarray(A, dtype=np.float64)
    b = _as_vector(b, "b")
    _check_same_dim(A, b)
    if spec.kind == "linear":
        return A.copy()
    if spec.kind == "rbf":
        kvals = gram(spec, A, b[:, None])[:, 0]
        return kvals[None, :] * (A - b[:, None]) / spec.sigma_sq
    s = _tanh_slope(spec)
    t = np.tanh(s * (A.T @ b) + spec.bias)
    return (s * (1.0 - t * t))[None, :] * A


def grad_wrt_each_column(spec: KernelSpec, a, B) -> np.ndarray:
    """Column i is the gradient of k(a, B[:, i]) with respect to B[:, i].

    The first argument is shared; the derivative is taken in each column of
    B separately. Returns a matrix shaped like B.
    """
    a = _as_vector(a, "a")
    B = np.asarray(B, dtype=np.float64)
    _check_same_dim(a, B)
    if spec.kind == "linear":
        return np.broadcast_to(a[:, None], B.shape).copy()
    if spec.kind == "rbf":
        kvals = gram(spec, a[:, None], B)[0]
        return kvals[None, :] * (a[:, None] - B) / spec.sigma_sq
    s = _tanh_slope(spec)
    t = np.tanh(s * (B.T @ a) + spec.bias)
    return np.outer(a, s * (1.0 - t * t))
