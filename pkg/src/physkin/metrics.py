"""Spectral quality metrics for learned weight fields.

All three metrics are functions of the Gram matrix of the column-normalized
weight matrix (points x handles), so they are invariant to global weight
rescaling:

  * omega_orth: squared Frobenius distance of the Gram to the identity,
    averaged over the K(K-1) off-diagonal slots.
  * kappa_log:  log2(1 + lambda_max / lambda_min); +inf sentinel when the
    smallest eigenvalue is at or below 1e-14 (rank collapse).
  * h_spec:     spectral entropy of the normalized eigenvalue distribution,
    scaled by 1/log K so a perfectly balanced spectrum scores 1.

Eigenvalues come from a self-contained cyclic Jacobi sweep; the module has
no dependency on LAPACK so results are bit-stable across BLAS builds.
"""

from __future__ import annotations

import numpy as np

RANK_EPS = 1e-14


def jacobi_eigs(S, tol=1e-12, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the largest absolute off-diagonal entry drops below
    ``tol`` or ``max_sweeps`` full sweeps have run.  Input asymmetry
    beyond 1e-9 is an error; the symmetric average is diagonalized.
    Returns eigenvalues in ascending order.
    """
    A = np.asarray(S, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"jacobi_eigs expects a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("jacobi_eigs: non-finite input")
    if np.abs(A - A.T).max(initial=0.0) > 1e-9:
        raise ValueError("jacobi_eigs: input is not symmetric (tolerance 1e-9)")
    A = 0.5 * (A + A.T)
    k = A.shape[0]
    if k == 1:
        return A.diagonal().copy()

    off = ~np.eye(k, dtype=bool)
    for _ in range(max_sweeps):
        if np.abs(A[off]).max() < tol:
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = A[p, q]
                if abs(apq) < tol * 1e-3:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if t == 0.0:   # theta == 0 gives sign 0; rotate by 45 degrees
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                A[p, q] = A[q, p] = 0.0
    return np.sort(A.diagonal())


def normalized_gram(W):
    """Gram matrix of column-normalized W (points x handles)."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"weights must be 2-D (points x handles), got {W.shape}")
    if W.shape[1] < 2:
        raise ValueError("need at least 2 handle columns")
    norms = np.sqrt((W * W).sum(axis=0))
    Wn = W / np.maximum(norms, 1e-150)
    return Wn.T @ Wn


def omega_orth(W) -> float:
    G = normalized_gram(W)
    k = G.shape[0]
    return float(((G - np.eye(k)) ** 2).sum() / (k * (k - 1)))


def kappa_log(W) -> float:
    lam = jacobi_eigs(normalized_gram(W))
    if lam[0] <= RANK_EPS:
        return float("inf")
    return float(np.log2(1.0 + lam[-1] / lam[0]))


def h_spec(W) -> float:
    G = normalized_gram(W)
    lam = np.maximum(jacobi_eigs(G), 0.0)
    total = lam.sum()
    if total <= 0:
        return 0.0
    p = lam / total
    nz = p > 0
    ent = -(p[nz] * np.log(p[nz])).sum()
    return float(ent / np.log(G.shape[0]))


def weight_metrics(W) -> dict:
    """All three spectral metrics in one pass over the Gram eigenvalues."""
    G = normalized_gram(W)
    k = G.shape[0]
    lam = jacobi_eigs(G)
    omega = float(((G - np.eye(k)) ** 2).sum() / (k * (k - 1)))
    if lam[0] <= RANK_EPS:
        kap = float("inf")
    else:
        kap = float(np.log2(1.0 + lam[-1] / lam[0]))
    lam_pos = np.maximum(lam, 0.0)
    total = lam_pos.sum()
    if total <= 0:
        ent = 0.0
    else:
        p = lam_pos / total
        nz = p > 0
        ent = float(-(p[nz] * np.log(p[nz])).sum() / np.log(k))
    return {"omega_orth": omega, "kappa_log": kap, "h_spec": ent}
