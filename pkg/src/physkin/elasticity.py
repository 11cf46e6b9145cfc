"""Hyperelastic energy densities over batched deformation gradients.

Two constitutive models share one interface:
  * linear:  psi = mu e:e + lam/2 tr(e)^2  with  e = (F + F^T)/2 - I
  * stable neo-hookean:
      psi = mu/2 (tr(F^T F) - 3) - mu (J - 1) + lam/2 (J - 1)^2
    whose first Piola-Kirchhoff stress is
      P = mu F + (lam (J - 1) - mu) cof(F).

All batch arguments are [n, 3, 3] float64.  9x9 Hessian blocks use the
row-major flattening of F (entry (a, b) maps to index 3a + b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FD_STEP = 1e-5


@dataclass(frozen=True)
class Material:
    youngs_modulus: float = 1.0e4
    poisson: float = 0.45
    density: float = 1.0e3

    def __post_init__(self):
        if not (0.0 <= self.poisson < 0.5):
            raise ValueError(f"poisson ratio must lie in [0, 0.5), got {self.poisson}")
        if self.youngs_modulus <= 0 or self.density <= 0:
            raise ValueError("youngs_modulus and density must be positive")

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson))

    @property
    def lam(self) -> float:
        nu = self.poisson
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


def _check_batch(F):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.shape[1:] != (3, 3):
        raise ValueError(f"expected deformation gradients of shape [n,3,3], got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise FloatingPointError("non-finite deformation gradient")
    return F


def cofactor(F):
    """cof(F) = J F^{-T}, assembled from column cross products (inversion safe)."""
    f0, f1, f2 = F[:, :, 0], F[:, :, 1], F[:, :, 2]
    return np.stack([np.cross(f1, f2), np.cross(f2, f0), np.cross(f0, f1)], axis=2)


class EnergyModel:
    """Energy density, stress, and projected Hessian for one model kind."""

    KINDS = ("linear", "stable-neo-hookean")

    def __init__(self, kind="stable-neo-hookean", material: Material | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown energy model kind {kind!r}; choose from {self.KINDS}")
        self.kind = kind
        self.material = material if material is not None else Material()

    def psi(self, F):
        F = _check_batch(F)
        mu, lam = self.material.mu, self.material.lam
        if self.kind == "linear":
            eps = 0.5 * (F + np.transpose(F, (0, 2, 1)))
            eps[:, 0, 0] -= 1.0
            eps[:, 1, 1] -= 1.0
            eps[:, 2, 2] -= 1.0
            tr = np.trace(eps, axis1=1, axis2=2)
            return mu * (eps * eps).sum(axis=(1, 2)) + 0.5 * lam * tr * tr
        J = np.linalg.det(F)
        ii = (F * F).sum(axis=(1, 2))
        return 0.5 * mu * (ii - 3.0) - mu * (J - 1.0) + 0.5 * lam * (J - 1.0) ** 2

    def pk1(self, F):
        F = _check_batch(F)
        mu, lam = self.material.mu, self.material.lam
        if self.kind == "linear":
            eps = 0.5 * (F + np.transpose(F, (0, 2, 1)))
            eps[:, 0, 0] -= 1.0
            eps[:, 1, 1] -= 1.0
            eps[:, 2, 2] -= 1.0
            tr = np.trace(eps, axis1=1, axis2=2)
            P = 2.0 * mu * eps
            P[:, 0, 0] += lam * tr
            P[:, 1, 1] += lam * tr
            P[:, 2, 2] += lam * tr
            return P
        J = np.linalg.det(F)
        return mu * F + (lam * (J - 1.0) - mu)[:, None, None] * cofactor(F)

    def hessian_psi(self, F):
        """PSD projection of d^2 psi / dF^2, one [9,9] block per point.

        Central finite differences of pk1 (step 1e-5), symmetrized, then
        eigenvalues clamped to >= 0.
        """
        return psd_project(fd_hessian(self.pk1, F))


class BlendedEnergy:
    """Convex combination (1-t) linear + t stable-neo-hookean.

    Used while training ramps from the convex linear model to the
    rotation-aware one; t is fixed per instance.
    """

    def __init__(self, material: Material, t: float):
        if not (0.0 <= t <= 1.0):
            raise ValueError(f"blend weight must lie in [0,1], got {t}")
        self.t = float(t)
        self.material = material
        self._lin = EnergyModel("linear", material)
        self._nh = EnergyModel("stable-neo-hookean", material)

    def psi(self, F):
        if self.t == 0.0:
            return self._lin.psi(F)
        if self.t == 1.0:
            return self._nh.psi(F)
        return (1.0 - self.t) * self._lin.psi(F) + self.t * self._nh.psi(F)

    def pk1(self, F):
        if self.t == 0.0:
            return self._lin.pk1(F)
        if self.t == 1.0:
            return self._nh.pk1(F)
        return (1.0 - self.t) * self._lin.pk1(F) + self.t * self._nh.pk1(F)

    def hessian_psi(self, F):
        return psd_project(fd_hessian(self.pk1, F))


def fd_hessian(pk1_fn, F, step=_FD_STEP, central=True):
    """Symmetrized finite-difference Hessian of an energy given its stress.

    Column k of each [9,9] block is (pk1(F + step e_k) - pk1(F - step e_k))
    / (2 step) flattened row-major; the result is averaged with its
    transpose to remove the finite-difference asymmetry.  central=False
    switches to forward differences (10 stress evaluations instead of 18),
    trading an O(step) bias for speed; good enough for a line-searched
    Newton metric, not for reference values.
    """
    F = _check_batch(F)
    n = F.shape[0]
    H = np.empty((n, 9, 9))
    P0 = None if central else pk1_fn(F).reshape(n, 9)
    for k in range(9):
        a, b = divmod(k, 3)
        Fp = F.copy(); Fp[:, a, b] += step
        if central:
            Fm = F.copy(); Fm[:, a, b] -= step
            H[:, :, k] = (pk1_fn(Fp) - pk1_fn(Fm)).reshape(n, 9) / (2.0 * step)
        else:
            H[:, :, k] = (pk1_fn(Fp).reshape(n, 9) - P0) / step
    return 0.5 * (H + np.transpose(H, (0, 2, 1)))


def psd_project(H):
    """Clamp eigenvalues of symmetric [n,9,9] blocks to >= 0.

    A pivoted-free LDL^T pass screens each block first: blocks that factor
    with safely positive pivots are already PSD, so clamping is the
    identity and the eigendecomposition can be skipped for them.
    """
    ok, _, _ = ldlt_screen(H)
    out = np.array(H)
    if not ok.all():
        sub = H[~ok]
        w, V = np.linalg.eigh(sub)
        w = np.maximum(w, 0.0)
        out[~ok] = np.einsum("nik,nk,njk->nij", V, w, V, optimize=True)
    return out


def psd_factors(H):
    """Factor PSD-projected blocks as H+ = R^T R, one [9,9] R per point.

    PSD blocks reuse their LDL^T factor (R = sqrt(D) L^T); indefinite
    blocks are eigen-clamped and factored as sqrt(lam+) V^T.  Exact for
    the projection semantics of ``psd_project``.
    """
    ok, L, d = ldlt_screen(H)
    n = H.shape[0]
    R = np.empty((n, 9, 9))
    if ok.any():
        R[ok] = np.sqrt(np.maximum(d[ok], 0.0))[:, :, None] * np.transpose(L[ok], (0, 2, 1))
    if not ok.all():
        w, V = np.linalg.eigh(H[~ok])
        w = np.maximum(w, 0.0)
        R[~ok] = np.sqrt(w)[:, :, None] * np.transpose(V, (0, 2, 1))
    return R


def ldlt_screen(H, rel_tol=1e-12):
    """Vectorized unpivoted LDL^T over [n,9,9] symmetric blocks.

    Returns (ok, L, d): ok marks blocks whose pivots all stayed above
    rel_tol times the block magnitude, i.e. blocks that are numerically
    positive definite.  Blocks flagged not-ok carry unusable factors and
    must be handled by an eigendecomposition.
    """
    n, k, _ = H.shape
    A = np.array(H)
    L = np.tile(np.eye(k), (n, 1, 1))
    d = np.empty((n, k))
    scale = np.abs(H.reshape(n, -1)).max(axis=1) + 1e-300
    ok = np.ones(n, dtype=bool)
    for j in range(k):
        dj = A[:, j, j]
        d[:, j] = dj
        bad = dj <= rel_tol * scale
        ok &= ~bad
        safe = np.where(bad, 1.0, dj)
        if j + 1 < k:
            col = A[:, j + 1:, j] / safe[:, None]
            L[:, j + 1:, j] = col
            A[:, j + 1:, j + 1:] -= col[:, :, None] * A[:, j, j + 1:][:, None, :]
    return ok, L, d
