"""Reduced-coordinate implicit dynamics over a learned skinning field.

The configuration map is linear in the stacked handle coordinates
z in R^{12m} (row-major flatten of each 3x4 affine Z_i):

    phi(X, z) = X + sum_i W_i(X) Z_i [X;1]
    F(X, z)   = I + sum_i (Z_i [X;1]) grad(W_i)^T + W_i Z_i[:, :3]

Each step minimizes the incremental potential

    1/(2 h^2) ||z - 2 z_t + z_{t-1}||^2_M + sum_q w_q psi(F_q(z))
    - g^T z + pins/drags,

by projected Newton (per-point PSD-projected Hessians), warm started at
the inertial guess.  Internally vectors live in a "block" layout
(row alpha outermost, then handle and column) because it turns the per
point maps into the Kronecker form I_3 (x) D_q; the public API speaks the
flat z layout exclusively and the permutation happens at the boundary.

Performance note (single-core budget): the elastic Hessian is assembled
from per-point factors with one large rank-k update, optionally on a
uniformly thinned point subset and frozen across the inner Newton
iterations of a step; gradients and energies always use every simulation
point, and the Armijo line search guarantees descent regardless of the
metric's staleness.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .elasticity import EnergyModel, Material, fd_hessian, psd_factors

try:
    from scipy.linalg import cho_factor, cho_solve
    from scipy.linalg.blas import dsyrk as _dsyrk
except Exception:   # pragma: no cover - scipy is normally present
    _dsyrk = None
    cho_factor = None


def _spd_solve(H, rhs):
    """Cholesky solve with escalating Tikhonov shifts.

    Skinning bases routinely have exact null directions (weight
    combinations that move no sample point), so the metric can be
    semidefinite; LU would silently return enormous steps along them.
    Cholesky fails loudly instead and the shift pins those directions.

    Returns (solution, shifted) where shifted says a fallback fired.
    """
    base = np.trace(H) / H.shape[0]
    shift = 0.0
    for attempt in range(8):
        try:
            if cho_factor is not None:
                Hs = H if shift == 0.0 else H + shift * np.eye(H.shape[0])
                return cho_solve(cho_factor(Hs, lower=True), rhs), shift > 0.0
            Hs = H if shift == 0.0 else H + shift * np.eye(H.shape[0])
            L = np.linalg.cholesky(Hs)
            y = np.linalg.solve(L, rhs)
            return np.linalg.solve(L.T, y), shift > 0.0
        except np.linalg.LinAlgError:
            shift = 1e-8 * base if shift == 0.0 else shift * 100.0
    raise np.linalg.LinAlgError("Newton metric not factorizable")

DEFAULT_H = 1.0 / 60.0
DEFAULT_GRAVITY = (0.0, -9.8, 0.0)
DEFAULT_PIN_STIFFNESS = 1.0e5


@dataclass
class HandleState:
    z: np.ndarray
    z_prev: np.ndarray
    h: float = DEFAULT_H

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64).ravel()
        self.z_prev = np.asarray(self.z_prev, dtype=np.float64).ravel()
        if self.z.shape != self.z_prev.shape:
            raise ValueError("z and z_prev disagree in size")
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.z_prev))):
            raise FloatingPointError("non-finite handle state")
        if self.h <= 0:
            raise ValueError("timestep must be positive")

    def velocity(self):
        return (self.z - self.z_prev) / self.h


@dataclass
class SimOptions:
    gamma: float = 0.01                  # Rayleigh damping rate, 1/s
    # infinity-norm force residual; forces at desk scale are O(1e3)-O(1e6),
    # so this leaves per-step position noise far below render precision
    newton_tol: float = 1e-2
    newton_max_iters: int = 10
    hessian_refresh: str = "step"        # "step" | "iteration"
    hessian_points: int | None = 1024    # metric subsample cap (None = all)
    sim_points_cap: int = 4096
    gravity: tuple = DEFAULT_GRAVITY

    def __post_init__(self):
        if self.hessian_refresh not in ("step", "iteration"):
            raise ValueError("hessian_refresh must be 'step' or 'iteration'")


@dataclass
class Pin:
    point: np.ndarray        # rest position [3]
    u: np.ndarray            # weight row vec(W_i x~_c) [4m]
    target: np.ndarray       # [3]
    stiffness: float


def _layout_perms(m):
    """z index (i,a,c) -> i*12 + a*4 + c;  block index -> a*4m + i*4 + c."""
    z2b = np.empty(12 * m, dtype=np.intp)
    for i in range(m):
        for a in range(3):
            for c in range(4):
                z2b[i * 12 + a * 4 + c] = a * 4 * m + i * 4 + c
    b2z = np.empty_like(z2b)
    b2z[z2b] = np.arange(12 * m)
    return z2b, b2z


class ReducedSystem:
    """Precomputed operators of one simulation-ready object.

    Holds the thinned simulation cubature (points, weights, W, grad W),
    the constant per-point D_q maps, the reduced mass matrix and gravity
    vector (flat z layout), and the active pins/drags.
    """

    def __init__(self, points, weights, W, G, material: Material,
                 energy: EnergyModel | None, gravity=DEFAULT_GRAVITY,
                 weight_fn=None):
        self.points = np.asarray(points, dtype=np.float64)
        self.w = np.asarray(weights, dtype=np.float64)
        self.W = np.asarray(W, dtype=np.float64)
        self.G = np.asarray(G, dtype=np.float64)
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.G))):
            raise FloatingPointError("non-finite field values")
        self.material = material
        self.energy = energy
        self.weight_fn = weight_fn
        n, m = self.W.shape
        self.n, self.m = n, m
        self.z2b, self.b2z = _layout_perms(m)

        xt = np.concatenate([self.points, np.ones((n, 1))], axis=1)     # [n,4]
        self.xt = xt
        # u_q[(i,c)] = W_i x~_c: the B_q row pattern
        self.U = (self.W[:, :, None] * xt[:, None, :]).reshape(n, 4 * m)
        # D_q[b,(i,c)] = x~_c dW_i/dx_b + delta_{cb} W_i: the F map
        D = np.einsum("qc,qib->qbic", xt, self.G).reshape(n, 3, 4 * m)
        wi = np.zeros((n, 3, m, 4))
        for b in range(3):
            wi[:, b, :, b] = self.W
        self.D = D + wi.reshape(n, 3, 4 * m)

        rho_w = material.density * self.w
        K = self.U.T @ (rho_w[:, None] * self.U)                        # [4m,4m]
        M_blk = np.kron(np.eye(3), K)
        self.M = M_blk[np.ix_(self.z2b, self.z2b)]
        # PSD sanity: Cholesky with a tiny shift must succeed
        np.linalg.cholesky(self.M + 1e-12 * np.eye(12 * m)
                           * max(1.0, np.trace(self.M) / (12 * m)))

        self.gravity = np.asarray(gravity, dtype=np.float64)
        grav_blk = np.outer(self.gravity, rho_w @ self.U).ravel()       # [3*4m]
        self.gravity_vec = grav_blk[self.z2b]

        self.pins: dict[int, Pin] = {}
        self.drags: dict[int, Pin] = {}
        self._next_id = 0
        self._pin_hessian_blk = None    # cache, invalidated on pin changes

    def set_gravity(self, gravity):
        self.gravity = np.asarray(gravity, dtype=np.float64)
        if self.gravity.shape != (3,):
            raise ValueError("gravity must be a 3-vector")
        rho_w = self.material.density * self.w
        grav_blk = np.outer(self.gravity, rho_w @ self.U).ravel()
        self.gravity_vec = grav_blk[self.z2b]

    # ---- explicit operators (tests, protocol) -----------------------

    def B(self, q):
        """Dense [3, 12m] map with phi(X_q, z) = X_q + B z."""
        B_blk = np.kron(np.eye(3), self.U[q][None, :])                  # [3, 3*4m]
        return B_blk[:, self.z2b]

    def C(self, q):
        """Dense [9, 12m] map with vec(F(X_q, z)) = vec(I) + C z."""
        C_blk = np.kron(np.eye(3), self.D[q])                           # [9, 3*4m]
        return C_blk[:, self.z2b]

    # ---- configuration maps ------------------------------------------

    def _zb(self, z):
        return np.asarray(z, dtype=np.float64).ravel()[self.b2z].reshape(3, 4 * self.m)

    def deformation_gradients(self, z):
        Zb = self._zb(z)
        F = np.matmul(self.D, Zb.T)            # [n, 3(b), 3(a)]
        F = np.transpose(F, (0, 2, 1)).copy()
        F[:, 0, 0] += 1.0
        F[:, 1, 1] += 1.0
        F[:, 2, 2] += 1.0
        return F

    def deform(self, points, z, W=None):
        """phi at arbitrary points; W defaults to a field evaluation."""
        points = np.asarray(points, dtype=np.float64)
        if W is None:
            if self.weight_fn is None:
                raise ValueError("no weight function attached for off-cubature points")
            W = self.weight_fn(points)
        return deform_points(points, W, z)

    # ---- pins / drags -------------------------------------------------

    def _weight_row(self, point):
        if self.weight_fn is None:
            raise ValueError("no weight function attached; pin by point_index instead")
        return np.asarray(self.weight_fn(np.asarray(point, dtype=np.float64)[None, :]))[0]

    def _make_pin(self, point_or_index, target, stiffness):
        if isinstance(point_or_index, (int, np.integer)):
            idx = int(point_or_index)
            if not (0 <= idx < self.n):
                raise IndexError(f"point index {idx} out of range [0,{self.n})")
            point = self.points[idx]
            u = self.U[idx]
        else:
            point = np.asarray(point_or_index, dtype=np.float64)
            if point.shape != (3,):
                raise ValueError("pin position must be a 3-vector")
            w_row = self._weight_row(point)
            xt = np.concatenate([point, [1.0]])
            u = (w_row[:, None] * xt[None, :]).ravel()
        target = point.copy() if target is None else np.asarray(target, dtype=np.float64)
        return Pin(point=point.copy(), u=u, target=target, stiffness=float(stiffness))

    def set_pin(self, point_or_index, target=None, stiffness=DEFAULT_PIN_STIFFNESS):
        pin = self._make_pin(point_or_index, target, stiffness)
        pid = self._next_id
        self._next_id += 1
        self.pins[pid] = pin
        self._pin_hessian_blk = None
        return pid

    def set_drag(self, point_or_index, target, stiffness=DEFAULT_PIN_STIFFNESS):
        pin = self._make_pin(point_or_index, target, stiffness)
        pid = self._next_id
        self._next_id += 1
        self.drags[pid] = pin
        self._pin_hessian_blk = None
        return pid

    def move_drag(self, pid, target):
        self.drags[pid].target = np.asarray(target, dtype=np.float64)

    def clear_pin(self, pid):
        self.pins.pop(pid, None)
        self._pin_hessian_blk = None

    def clear_drag(self, pid):
        self.drags.pop(pid, None)
        self._pin_hessian_blk = None

    def clear_all(self):
        self.pins.clear()
        self.drags.clear()
        self._pin_hessian_blk = None

    def _all_constraints(self):
        yield from self.pins.values()
        yield from self.drags.values()

    def _constraint_energy(self, Zb):
        e = 0.0
        for pin in self._all_constraints():
            if pin.stiffness == 0.0:
                continue
            r = pin.point + Zb @ pin.u - pin.target
            e += 0.5 * pin.stiffness * float(r @ r)
        return e

    def _constraint_grad_blk(self, Zb):
        g = np.zeros((3, 4 * self.m))
        for pin in self._all_constraints():
            if pin.stiffness == 0.0:
                continue
            r = pin.point + Zb @ pin.u - pin.target
            g += pin.stiffness * np.outer(r, pin.u)
        return g

    def _constraint_hessian_blk(self):
        if self._pin_hessian_blk is None:
            H = np.zeros((4 * self.m, 4 * self.m))
            for pin in self._all_constraints():
                H += pin.stiffness * np.outer(pin.u, pin.u)
            self._pin_hessian_blk = H
        return self._pin_hessian_blk


def deform_points(points, W, z):
    """x = X + sum_i W_i(X) Z_i [X;1] for arbitrary points."""
    points = np.asarray(points, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).ravel()
    n, m = W.shape
    Z = z.reshape(m, 3, 4)
    xt = np.concatenate([points, np.ones((n, 1))], axis=1)
    # disp = sum_i W_i (Z_i x~): einsum over handles
    return points + np.einsum("qi,iac,qc->qa", W, Z, xt, optimize=True)


def assemble_operators(field, cubature, material: Material,
                       energy: EnergyModel | None = None,
                       options: SimOptions | None = None,
                       weight_fn=None) -> ReducedSystem:
    """Build a ReducedSystem from a field evaluation over a cubature set.

    Simulation points default to the interior cubature points, uniformly
    thinned to ``options.sim_points_cap`` with weights rescaled to
    preserve the integrated volume; surface points are used only when the
    cubature has no interior.
    """
    options = options or SimOptions()
    if field.gradients is None:
        raise ValueError("assemble_operators needs a field evaluated with gradients")
    if len(field.points) != len(cubature.points):
        raise ValueError("field evaluation does not cover the cubature set")

    interior = np.nonzero(cubature.kind == 1)[0]
    pool = interior if interior.size else np.arange(len(cubature.points))
    cap = options.sim_points_cap
    if cap is not None and pool.size > cap:
        stride_idx = np.linspace(0, pool.size - 1, cap).round().astype(np.intp)
        keep = pool[np.unique(stride_idx)]
    else:
        keep = pool
    w = cubature.volume_weight[keep]
    w = w * (cubature.volume_weight[pool].sum() / w.sum())

    return ReducedSystem(
        points=cubature.points[keep], weights=w,
        W=field.weights[keep], G=field.gradients[keep],
        material=material,
        energy=energy if energy is not None else EnergyModel(material=material),
        gravity=np.asarray(options.gravity, dtype=np.float64),
        weight_fn=weight_fn,
    )


# ---- objective / gradient / Hessian ---------------------------------


def objective(sys: ReducedSystem, z, state: HandleState) -> float:
    """Incremental potential of Eq-style implicit stepping (no damping term)."""
    z = np.asarray(z, dtype=np.float64).ravel()
    zhat = 2.0 * state.z - state.z_prev
    dz = z - zhat
    e = 0.5 / state.h ** 2 * float(dz @ (sys.M @ dz))
    if sys.energy is not None:
        e += float(sys.w @ sys.energy.psi(sys.deformation_gradients(z)))
    e -= float(sys.gravity_vec @ z)
    e += sys._constraint_energy(sys._zb(z))
    return e


def objective_grad(sys: ReducedSystem, z, state: HandleState, gamma=0.0):
    """Analytic gradient; gamma > 0 adds the Rayleigh damping force."""
    z = np.asarray(z, dtype=np.float64).ravel()
    zhat = 2.0 * state.z - state.z_prev
    g = sys.M @ (z - zhat) / state.h ** 2 - sys.gravity_vec
    Zb = sys._zb(z)
    if sys.energy is not None:
        P = sys.energy.pk1(sys.deformation_gradients(z))
        # dE/dZb[a,ic] = sum_{q,b} w_q P[q,a,b] D[q,b,ic], as one dgemm
        wP = np.ascontiguousarray(np.transpose(sys.w[:, None, None] * P, (1, 0, 2)))
        g_blk = wP.reshape(3, -1) @ sys.D.reshape(-1, 4 * sys.m)
        g += g_blk.ravel()[sys.z2b]
    cg = sys._constraint_grad_blk(Zb)
    g += cg.ravel()[sys.z2b]
    if gamma != 0.0:
        g += gamma / state.h * (sys.M @ (z - state.z))
    return g


def _elastic_hessian(sys: ReducedSystem, z, points_cap=None):
    """sum_q w_q C_q^T projected(d2psi) C_q via per-point factors.

    With H_q+ = R_q^T R_q the sum is S^T S for the stacked rows
    S[(q,k), (a,ic)] = sqrt(w_q) R_q[k,(a,b)] D_q[b,ic]; one rank-9n
    update builds the full matrix.
    """
    n, m = sys.n, sys.m
    if points_cap is not None and n > points_cap:
        sel = np.unique(np.linspace(0, n - 1, points_cap).round().astype(np.intp))
        scale = sys.w.sum() / sys.w[sel].sum()
    else:
        sel = slice(None)
        scale = 1.0
    F = sys.deformation_gradients(z)[sel]
    # one-sided FD here: the metric only steers Newton, accuracy is cheap
    R = psd_factors(fd_hessian(sys.energy.pk1, F, central=False))
    D = sys.D[sel]
    w = sys.w[sel] * scale
    k = len(w)
    # T[q, (k,a), ic] = R[q, (k,a), b] D[q, b, ic]
    Tq = np.matmul(R.reshape(k, 27, 3), D)                 # [k, 27, 4m]
    Tq *= np.sqrt(w)[:, None, None]
    S = Tq.reshape(k, 9, 12 * m).reshape(k * 9, 12 * m)
    if _dsyrk is not None:
        H_blk = _dsyrk(1.0, S, trans=1)
        H_blk = H_blk + np.triu(H_blk, 1).T
    else:
        H_blk = S.T @ S
    return H_blk[np.ix_(sys.z2b, sys.z2b)]


def hessian(sys: ReducedSystem, z, state: HandleState, gamma=0.0, points_cap=None):
    """Full Newton metric: inertia + projected elastic + pins + damping."""
    H = sys.M / state.h ** 2
    if sys.energy is not None:
        H = H + _elastic_hessian(sys, z, points_cap)
    Hc = sys._constraint_hessian_blk()
    if Hc.any():
        H = H + np.kron(np.eye(3), Hc)[np.ix_(sys.z2b, sys.z2b)]
    if gamma != 0.0:
        H = H + gamma / state.h * sys.M
    return H


@dataclass
class NewtonResult:
    z: np.ndarray
    iterations: int
    converged: bool
    warnings: list = field(default_factory=list)
    objective_value: float = 0.0


def newton_solve(sys: ReducedSystem, state: HandleState,
                 options: SimOptions | None = None) -> NewtonResult:
    """Projected Newton with Armijo backtracking from the inertial guess.

    The merit function is the objective plus the variational damping
    quadratic (gamma/2h)||z - z_t||^2_M, whose gradient is exactly the
    damped force; with gamma = 0 the merit is the objective itself.
    """
    options = options or SimOptions()
    gamma = options.gamma
    zhat = 2.0 * state.z - state.z_prev
    z = zhat.copy()

    def merit(zv):
        e = objective(sys, zv, state)
        if gamma != 0.0:
            d = zv - state.z
            e += 0.5 * gamma / state.h * float(d @ (sys.M @ d))
        return e

    f = merit(z)
    if not np.isfinite(f):
        raise FloatingPointError("objective not finite at warm start")
    warnings = []
    H = None
    iters = 0
    converged = False
    for it in range(options.newton_max_iters):
        g = objective_grad(sys, z, state, gamma=gamma)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in Newton solve")
        if np.abs(g).max() < options.newton_tol:
            converged = True
            break
        if H is None or options.hessian_refresh == "iteration":
            H = hessian(sys, z, state, gamma=gamma, points_cap=options.hessian_points)
        dz, shifted = _spd_solve(H, -g)
        if shifted:
            warnings.append("tikhonov_fallback")
        if dz @ g >= 0:   # not a descent direction: fall back to steepest descent
            dz = -g
            warnings.append("non_descent_direction")
        step_len = 1.0
        accepted = False
        gd = float(g @ dz)
        for _ in range(21):
            cand = z + step_len * dz
            fc = merit(cand)
            if np.isfinite(fc) and fc <= f + 1e-4 * step_len * gd:
                z, f = cand, fc
                accepted = True
                break
            step_len *= 0.5
        iters = it + 1
        if not accepted:
            warnings.append("line_search_exhausted")
            break
    else:
        pass
    return NewtonResult(z=z, iterations=iters, converged=converged,
                        warnings=warnings, objective_value=f)


@dataclass
class StepStats:
    solve_ms: float
    iterations: int
    converged: bool
    objective_value: float
    warnings: list


def step(sys: ReducedSystem, state: HandleState,
         options: SimOptions | None = None):
    """Advance one implicit step; returns (new_state, StepStats)."""
    t0 = time.perf_counter()
    res = newton_solve(sys, state, options)
    solve_ms = (time.perf_counter() - t0) * 1e3
    new_state = HandleState(z=res.z, z_prev=state.z.copy(), h=state.h)
    return new_state, StepStats(solve_ms=solve_ms, iterations=res.iterations,
                                converged=res.converged,
                                objective_value=res.objective_value,
                                warnings=res.warnings)


def init_state(sys: ReducedSystem, h=DEFAULT_H, z0=None, kickstart=True) -> HandleState:
    """Rest state with a Verlet-consistent half-step in z_prev.

    Seeding z_prev = z0 + h^2/2 M^{-1} f(z0) makes the leapfrog recurrence
    second-order from the first step (a rest-start under constant force
    then tracks the analytic trajectory exactly); kickstart=False gives
    the plain z_prev = z0 start.
    """
    dim = 12 * sys.m
    z0 = np.zeros(dim) if z0 is None else np.asarray(z0, dtype=np.float64).ravel()
    if not kickstart:
        return HandleState(z=z0.copy(), z_prev=z0.copy(), h=h)
    rest = HandleState(z=z0.copy(), z_prev=z0.copy(), h=h)
    force = -objective_grad(sys, z0, rest)   # static part only: inertia is 0 at z0
    # lstsq with eigenvalue truncation: the reduced mass is singular along
    # weight-space gauge directions and those must get zero acceleration
    accel, *_ = np.linalg.lstsq(sys.M, force, rcond=1e-10)
    return HandleState(z=z0.copy(), z_prev=z0 + 0.5 * h * h * accel, h=h)
