"""Max-margin contrastive loss, its gradients, and the InfoNCE baseline.

The max-margin loss for one anchor is

    loss = alpha' (k(Z-, z) - k(z+, z) 1)

where alpha comes from an SVM dual solve on (z+, Z-) and is treated as a
constant during differentiation: gradients reach the embeddings only
through the kernel evaluations, never through the solver. The SVM decision
function w(z) = alpha' (k(z+, z) 1 - k(Z-, z)) is the negated loss.

``batch_loss`` applies this per anchor over a two-view batch: anchor k uses
view1[k] as the SVM positive, view2[k] as the scored point, and the other
2(N-1) columns of both views as negatives.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kernels import KernelSpec, gram, grad_wrt_each_column, grad_wrt_second, kernel_grad
from .svm import (SingularInstanceError, SolverConfig, SvmInstance, resolve_step_sizes,
                  solve_inv, solve_oracle, solve_pgd, _draw_alpha0, _pgd_batched)


@dataclass
class LossBatch:
    """One anchor's view of a batch: scored point z, SVM positive z_pos,
    negatives Z_neg (d x n columns), and the solved dual weights alpha."""

    z: np.ndarray
    z_pos: np.ndarray
    Z_neg: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.z_pos = np.asarray(self.z_pos, dtype=np.float64)
        self.Z_neg = np.asarray(self.Z_neg, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        d = self.z.shape[0]
        if self.z_pos.shape != (d,) or self.Z_neg.ndim != 2 or self.Z_neg.shape[0] != d:
            raise ValueError(
                f"shape mismatch: z {self.z.shape}, z_pos {self.z_pos.shape}, Z_neg {self.Z_neg.shape}")
        if self.alpha.shape != (self.Z_neg.shape[1],):
            raise ValueError(
                f"alpha length {self.alpha.shape} does not match {self.Z_neg.shape[1]} negatives")


@dataclass
class LossGrads:
    d_z: np.ndarray
    d_z_pos: np.ndarray
    d_Z_neg: np.ndarray


def mmcl_loss(batch: LossBatch, spec: KernelSpec) -> float:
    """alpha' (k(Z-, z) - k(z+, z) 1)."""
    k_neg = gram(spec, batch.Z_neg, batch.z[:, None])[:, 0]
    k_pos = gram(spec, batch.z_pos[:, None], batch.z[:, None])[0, 0]
    return float(batch.alpha @ (k_neg - k_pos))


def decision_function(batch: LossBatch, spec: KernelSpec) -> float:
    """SVM score of z: alpha' (k(z+, z) 1 - k(Z-, z)); positive means z is
    classified on the positive side."""
    return -mmcl_loss(batch, spec)


def mmcl_grad(batch: LossBatch, spec: KernelSpec) -> LossGrads:
    """Gradients of ``mmcl_loss`` w.r.t. z, z_pos, and each negative column,
    with alpha held constant."""
    alpha = batch.alpha
    alpha_sum = float(np.sum(alpha))
    # d/dz: sum_i alpha_i dk(z_i-, z)/dz - (sum alpha) dk(z+, z)/dz
    d_z = grad_wrt_second(spec, batch.Z_neg, batch.z) @ alpha
    d_z -= alpha_sum * kernel_grad(spec, batch.z_pos, batch.z)
    # d/dz+: -(sum alpha) dk(z, z+)/dz+  (kernels are symmetric)
    d_z_pos = -alpha_sum * kernel_grad(spec, batch.z, batch.z_pos)
    # d/dz_i-: alpha_i dk(z, z_i-)/dz_i-
    d_Z_neg = grad_wrt_each_column(spec, batch.z, batch.Z_neg) * alpha[None, :]
    return LossGrads(d_z=d_z, d_z_pos=d_z_pos, d_Z_neg=d_Z_neg)


def fn_correct(alpha: np.ndarray, C: float, tol: float = 1e-9) -> np.ndarray:
    """False-negative correction: zero every coordinate at the box bound C.

    Equality is tested with absolute tolerance ``tol`` since solver
    projection sets boundary values exactly but the least-squares clip can
    leave round-off. Idempotent; a no-op for C = inf.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if not math.isfinite(C):
        return alpha.copy()
    return np.where(np.abs(alpha - C) <= tol, 0.0, alpha)


def nce_loss(z, z_pos, Z_neg, temperature: float) -> float:
    """InfoNCE: -log[ g(z,z+) / (g(z,z+) + sum_i g(z,z_i-)) ],
    g(a, b) = exp(a.b / temperature)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    z_pos = np.asarray(z_pos, dtype=np.float64)
    Z_neg = np.asarray(Z_neg, dtype=np.float64)
    s_pos = float(z @ z_pos) / temperature
    s_neg = (Z_neg.T @ z) / temperature
    # -s_pos + logsumexp([s_pos, s_neg...]), stabilized by the max score
    m = max(s_pos, float(np.max(s_neg)))
    lse = m + math.log(math.exp(s_pos - m) + float(np.sum(np.exp(s_neg - m))))
    return lse - s_pos


def nce_grad(z, z_pos, Z_neg, temperature: float) -> LossGrads:
    """Analytic softmax gradients of ``nce_loss`` w.r.t. all three slots."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=np.float64)
    z_pos = np.asarray(z_pos, dtype=np.float64)
    Z_neg = np.asarray(Z_neg, dtype=np.float64)
    s_pos = float(z @ z_pos) / temperature
    s_neg = (Z_neg.T @ z) / temperature
    m = max(s_pos, float(np.max(s_neg)))
    e_pos = math.exp(s_pos - m)
    e_neg = np.exp(s_neg - m)
    total = e_pos + float(np.sum(e_neg))
    p_pos = e_pos / total
    p_neg = e_neg / total
    d_z = ((p_pos - 1.0) * z_pos + Z_neg @ p_neg) / temperature
    d_z_pos = (p_pos - 1.0) * z / temperature
    d_Z_neg = np.outer(z, p_neg) / temperature
    return LossGrads(d_z=d_z, d_z_pos=d_z_pos, d_Z_neg=d_Z_neg)


@lru_cache(maxsize=32)
def _negative_indices_cached(N: int) -> np.ndarray:
    idx = np.empty((N, 2 * (N - 1)), dtype=np.int64)
    all_idx = np.arange(2 * N)
    for k in range(N):
        others = np.concatenate([all_idx[:N][all_idx[:N] != k],
                                 all_idx[N:][all_idx[N:] != N + k]])
        idx[k] = others
    idx.setflags(write=False)
    return idx


def negative_indices(N: int) -> np.ndarray:
    """Row k lists the 2(N-1) stacked-column indices of anchor k's negatives:
    view-1 columns of the other batch items, then their view-2 columns."""
    return _negative_indices_cached(N)


def _anchor_deltas(K_full: np.ndarray, neg_idx: np.ndarray, beta: float):
    """Per-anchor (k_xx, k_xY, K_YY, delta) slices from the full Gram matrix."""
    N = neg_idx.shape[0]
    k_xx = np.diag(K_full)[:N]
    k_xY = np.take_along_axis(K_full[:N], neg_idx, axis=1)
    K_YY = K_full[neg_idx[:, :, None], neg_idx[:, None, :]]
    deltas = k_xx[:, None, None] + K_YY - k_xY[:, :, None] - k_xY[:, None, :]
    n = neg_idx.shape[1]
    deltas[:, np.arange(n), np.arange(n)] += beta
    return k_xx, k_xY, K_YY, deltas


def _solve_anchor(delta_k, k_xY_k, K_YY_k, k_xx_k, C, beta, solver, method, seed_key):
    inst = SvmInstance(k_xY=k_xY_k, K_YY=K_YY_k, k_xx=k_xx_k, delta=delta_k, C=C, beta=beta)
    if method == "inv":
        return solve_inv(inst)
    if method == "oracle":
        return solve_oracle(inst, tol=solver.tol)
    return solve_pgd(inst, solver, alpha0=_draw_alpha0(inst.n, C, seed_key))


def _grad_coeff(spec: KernelSpec, kvals):
    """Multiplier turning a stored kernel value into its pair gradient:
    rbf grad = c (u - v), linear/tanh grad = c u (w.r.t. v)."""
    if spec.kind == "rbf":
        return kvals / spec.sigma_sq
    if spec.kind == "linear":
        return np.ones_like(kvals)
    s = spec.gamma if spec.positive_gamma else -spec.gamma
    return s * (1.0 - kvals * kvals)


def _accumulate_anchor_terms(spec, E, K_full, neg_idx, alphas, N, d_E):
    """Losses and gradient accumulation for every anchor, reusing the batch
    Gram matrix instead of re-evaluating kernels. Matches the composition of
    ``mmcl_loss`` / ``mmcl_grad`` over anchors to float round-off."""
    total = 0.0
    rbf = spec.kind == "rbf"
    for k in range(N):
        idx = neg_idx[k]
        a = N + k
        alpha = alphas[k]
        alpha_sum = float(np.sum(alpha))
        kneg = K_full[idx, a]
        kpos = K_full[k, a]
        total += float(alpha @ kneg - alpha_sum * kpos)

        z = E[:, a]
        z_pos = E[:, k]
        negs = E[:, idx]
        w_neg = alpha * _grad_coeff(spec, kneg)
        w_pos = alpha_sum * float(_grad_coeff(spec, np.asarray(kpos)))
        if rbf:
            d_z = negs @ w_neg - z * float(np.sum(w_neg)) - w_pos * (z_pos - z)
            d_E[:, a] += d_z
            d_E[:, k] += -w_pos * (z - z_pos)
            d_E[:, idx] += np.outer(z, w_neg) - negs * w_neg[None, :]
        else:
            d_E[:, a] += negs @ w_neg - w_pos * z_pos
            d_E[:, k] += -w_pos * z
            d_E[:, idx] += np.outer(z, w_neg)
    return total


def batch_loss(embeddings_view1, embeddings_view2, spec: KernelSpec, C: float,
               beta: float, solver: SolverConfig, fn_correction: bool = False,
               method: str = "pgd", threads: int = 1):
    """Per-anchor SVM solves and max-margin losses over a two-view batch.

    Both views are d' x N with aligned columns. For each anchor k the SVM
    positive is view1[:, k], the scored point is view2[:, k], and the
    negatives are the 2(N-1) other columns of both views. Returns
    ``(total_loss, grads1, grads2, alphas)`` where grads1/grads2 are the
    accumulated loss gradients w.r.t. each view's embedding matrix and
    ``alphas`` is the per-anchor list of dual vectors (post-correction when
    ``fn_correction`` is set).

    With ``threads`` = 1 the PGD solves run as one stacked iteration; with
    more threads the per-anchor solves are dispatched to a pool and the
    gradient accumulation stays in fixed anchor order, so the two modes
    agree to float round-off.
    """
    V1 = np.asarray(embeddings_view1, dtype=np.float64)
    V2 = np.asarray(embeddings_view2, dtype=np.float64)
    if V1.shape != V2.shape or V1.ndim != 2:
        raise ValueError(f"views must share shape d' x N, got {V1.shape} and {V2.shape}")
    N = V1.shape[1]
    if N < 2:
        raise ValueError(f"batch size must be >= 2 (no negatives exist for N={N})")
    if method not in ("pgd", "inv", "oracle"):
        raise ValueError(f"unknown solver method {method!r}")

    E = np.concatenate([V1, V2], axis=1)  # columns 0..N-1 = view1, N..2N-1 = view2
    K_full = gram(spec, E, E)
    neg_idx = negative_indices(N)
    k_xx, k_xY, K_YY, deltas = _anchor_deltas(K_full, neg_idx, beta)

    if method == "pgd" and threads == 1:
        alpha0 = np.stack([_draw_alpha0(deltas.shape[1], C, [solver.seed, k]) for k in range(N)])
        eta = resolve_step_sizes(deltas, solver.step_size)
        alphas_arr, _, _, _ = _pgd_batched(
            deltas, C, eta, alpha0, solver.max_iters, solver.tol, solver.nesterov)
        solutions = list(alphas_arr)
    elif method == "inv" and threads == 1:
        try:
            unconstrained = 2.0 * np.linalg.solve(deltas, np.ones(deltas.shape[1]))
        except np.linalg.LinAlgError as exc:
            raise SingularInstanceError(f"singular anchor delta in batch of {N}: {exc}") from exc
        solutions = list(np.clip(unconstrained, 0.0, C))
    else:
        def run(k):
            sol = _solve_anchor(deltas[k], k_xY[k], K_YY[k], float(k_xx[k]),
                                C, beta, solver, method, [solver.seed, k])
            return sol.alpha
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                solutions = list(pool.map(run, range(N)))
        else:
            solutions = [run(k) for k in range(N)]

    if fn_correction:
        alphas = [fn_correct(sol, C) for sol in solutions]
    else:
        alphas = [np.asarray(sol) for sol in solutions]
    d_E = np.zeros_like(E)
    total = _accumulate_anchor_terms(spec, E, K_full, neg_idx, alphas, N, d_E)
    return total, d_E[:, :N].copy(), d_E[:, N:].copy(), alphas


def nce_batch_loss(embeddings_view1, embeddings_view2, temperature: float):
    """InfoNCE over the same anchor/negative layout as ``batch_loss``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    V1 = np.asarray(embeddings_view1, dtype=np.float64)
    V2 = np.asarray(embeddings_view2, dtype=np.float64)
    if V1.shape != V2.shape or V1.ndim != 2:
        raise ValueError(f"views must share shape d' x N, got {V1.shape} and {V2.shape}")
    N = V1.shape[1]
    if N < 2:
        raise ValueError(f"batch size must be >= 2 (no negatives exist for N={N})")
    E = np.concatenate([V1, V2], axis=1)
    neg_idx = negative_indices(N)
    scores = (E.T @ E) / temperature
    total = 0.0
    d_E = np.zeros_like(E)
    for k in range(N):
        idx = neg_idx[k]
        a = N + k
        s_pos = scores[a, k]
        s_neg = scores[a, idx]
        m = max(s_pos, float(np.max(s_neg)))
        e_pos = math.exp(s_pos - m)
        e_neg = np.exp(s_neg - m)
        denom = e_pos + float(np.sum(e_neg))
        total += (m + math.log(denom)) - s_pos
        p_pos = e_pos / denom
        p_neg = e_neg / denom
        d_E[:, a] += ((p_pos - 1.0) * E[:, k] + E[:, idx] @ p_neg) / temperature
        d_E[:, k] += (p_pos - 1.0) * E[:, a] / temperature
        d_E[:, idx] += np.outer(E[:, a], p_neg) / temperature
    return total, d_E[:, :N].copy(), d_E[:, N:].copy()
