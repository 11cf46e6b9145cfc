"""Physics-informed self-supervised training of the skinning field.

Three losses drive the field toward a simulation-ready basis without any
ground-truth data: expected elastic potential under random subspace
excitations, spatial smoothness of the weight field, and pairwise
orthogonality of the weight columns.  Their gradients are combined
conflict-free (every loss keeps an equal, non-negative cosine with the
applied update) and fed to Adam under a warmup+cosine schedule.

The potential loss is the expensive one: it needs d(loss)/d(weights) and
d(loss)/d(weight gradients) through the elastic energy for a whole batch
of subspace draws.  That chain is a single fused tape op here
(lbs_potential) with an analytic backward via the first Piola stress,
instead of taping out B*n*9 elementwise energy expressions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .elasticity import BlendedEnergy, Material
from .metrics import weight_metrics
from .model import FD_STEP_SPATIAL, SkinningNet, eval_field, save_checkpoint, stencil_points

CONFIG_GRAM_EPS = 1e-10


@dataclass
class TrainConfig:
    total_iters: int = 2000
    z_batch: int = 64
    cubature_batch: int = 512
    # final orthogonality batch; the per-step batch is annealed up to this
    # by orth_batch_schedule.  The estimator has a 1/n noise floor
    # (batch-normalized column cosines), so the end-of-run batch must be much
    # larger than the gradient batches to converge below ~1e-3; the loss
    # itself is cheap (single forward, no stencil, no subspace draws)
    orth_batch: int = 4096
    mu_z: float = 0.2
    lambda_pot: float = 1.0
    lambda_orth: float = 1.0
    lr_max: float = 5e-4
    lr_min: float = 5e-5
    warmup_fraction: float = 0.01
    seed: int = 0
    checkpoint_every: int = 500
    metrics_every: int = 200
    h_fd: float = FD_STEP_SPATIAL

    def __post_init__(self):
        if self.mu_z <= 0:
            raise ValueError("mu_z must be positive")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.z_batch < 1 or self.cubature_batch < 1 or self.orth_batch < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.total_iters < 1:
            raise ValueError("total_iters must be at least 1")


@dataclass
class LossReport:
    iter: int
    l_pot: float
    l_smooth: float
    l_orth: float
    blend: float
    lr: float
    mu_z: float
    grad_norms: dict
    cosines: dict
    step_ms: float = 0.0
    metrics: dict | None = None

    def to_json(self):
        d = {k: v for k, v in self.__dict__.items() if v is not None}
        return json.dumps(d, sort_keys=True)


def sample_subspace(batch, m, mu_z=0.2, rng=None):
    """i.i.d. z ~ N(0, mu_z^2 I) draws, [batch, 12m]."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return mu_z * rng.standard_normal((batch, 12 * m))


def blend_schedule(it, total):
    """Material blend: linear elasticity ramping to neo-Hookean by mid-run."""
    return min(1.0, it / (0.5 * total))


def orth_batch_schedule(it, total, final_batch):
    """Orthogonality batch growing geometrically from final_batch/64.

    The batch-normalized Gram estimator carries a ~1/n sampling-noise floor,
    so the measured orthogonality residual tracks a strictly decreasing
    envelope as the batch grows.  Annealing does two things at once: early
    on the high floor keeps the field from over-converging to the soft
    material's compromise (which the stiffening blend would then push back
    up, breaking monotone convergence), and late the large batch lets the
    residual settle well below 1e-3.
    """
    start = max(1, final_batch // 64)
    if start >= final_batch:
        return final_batch
    s = min(1.0, it / max(1, total - 1))
    return int(round(start * (final_batch / start) ** s))


def lr_schedule(it, cfg: TrainConfig):
    """Linear warmup over the first 1% of iters, then cosine to lr_min."""
    if not (0 <= it < cfg.total_iters):
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
    warmup = max(1, round(cfg.total_iters * cfg.warmup_fraction))
    if it < warmup:
        return cfg.lr_max * (it + 1) / warmup
    span = max(1, cfg.total_iters - 1 - warmup)
    s = min(1.0, (it - warmup) / span)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + np.cos(np.pi * s))


# ---- fused potential-energy loss -------------------------------------


def lbs_potential(W, Gx, Gy, Gz, points, vol_w, z_draws, energy):
    """Mean over z draws of sum_q w_q Psi(F(X_q, z)) as one tape node.

    F(X_q, z) = I + sum_i (Z_i x~_q) grad(W_i)^T + W_i Z_i^lin, built from
    the weight tensor and its three spatial-derivative tensors; backward
    routes the first Piola stress through the same linear maps.
    """
    points = np.asarray(points, dtype=np.float64)
    vol_w = np.asarray(vol_w, dtype=np.float64)
    z_draws = np.asarray(z_draws, dtype=np.float64)
    n, m = W.data.shape
    B = len(z_draws)
    Z = z_draws.reshape(B, m, 3, 4)
    Zlin = np.ascontiguousarray(Z[:, :, :, :3])
    xt = np.concatenate([points, np.ones((n, 1))], axis=1)
    zx = np.einsum("kiac,qc->kqia", Z, xt, optimize=True)      # [B,n,m,3]

    def assemble(Wd, Gd):
        F = np.einsum("kqia,qib->kqab", zx, Gd, optimize=True)
        F += np.einsum("qi,kiab->kqab", Wd, Zlin, optimize=True)
        F[:, :, 0, 0] += 1.0
        F[:, :, 1, 1] += 1.0
        F[:, :, 2, 2] += 1.0
        return F

    G = np.stack([Gx.data, Gy.data, Gz.data], axis=2)          # [n,m,3]
    F = assemble(W.data, G)
    psi = energy.psi(F.reshape(-1, 3, 3)).reshape(B, n)
    if not np.all(np.isfinite(psi)):
        k, q = np.argwhere(~np.isfinite(psi))[0]
        raise FloatingPointError(
            f"non-finite energy at cubature point {q} (draw {k})")
    out = np.array([float((psi * vol_w[None, :]).sum()) / B])

    def backward(g):
        s = float(g[0]) / B
        P = energy.pk1(F.reshape(-1, 3, 3)).reshape(B, n, 3, 3)
        P *= s * vol_w[None, :, None, None]
        dW = np.einsum("kqab,kiab->qi", P, Zlin, optimize=True)
        dG = np.einsum("kqab,kqia->qib", P, zx, optimize=True)
        return [dW, dG[:, :, 0], dG[:, :, 1], dG[:, :, 2]]

    tape = W.tape if W.tape is not None else Gx.tape
    return tape.record(out, (W, Gx, Gy, Gz), backward)


def _stencil_split(W_all, n, h_fd):
    """[7n,m] stencil weights -> (center, gx, gy, gz) tape tensors."""
    Wc = T.slice_rows(W_all, 0, n)
    grads = []
    for a in range(3):
        plus = T.slice_rows(W_all, (1 + 2 * a) * n, (2 + 2 * a) * n)
        minus = T.slice_rows(W_all, (2 + 2 * a) * n, (3 + 2 * a) * n)
        grads.append(T.scale(T.sub(plus, minus), 1.0 / (2.0 * h_fd)))
    return Wc, grads[0], grads[1], grads[2]


def _forward_stencil(net, L, points, h_fd, surface=None):
    F_h = net.handle_root(L, surface)
    W_layer = net.oni(L)
    sp = stencil_points(points, h_fd)
    return net.weights_at(L, sp, F_h, W_layer)


def loss_pot(net, L, points, vol_w, z_draws, energy,
             h_fd=FD_STEP_SPATIAL, surface=None):
    W_all = _forward_stencil(net, L, points, h_fd, surface)
    Wc, gx, gy, gz = _stencil_split(W_all, len(points), h_fd)
    return lbs_potential(Wc, gx, gy, gz, points, vol_w, z_draws, energy)


def loss_smooth(net, L, points, h_fd=FD_STEP_SPATIAL, surface=None):
    """Mean over points of sum_i ||grad W_i||^2."""
    W_all = _forward_stencil(net, L, points, h_fd, surface)
    _, gx, gy, gz = _stencil_split(W_all, len(points), h_fd)
    total = T.add(T.add(T.sum_all(T.square(gx)), T.sum_all(T.square(gy))),
                  T.sum_all(T.square(gz)))
    return T.scale(total, 1.0 / len(points))


def loss_orth(net, L, points, surface=None):
    """Sum of squared off-diagonal entries of the normalized weight Gram."""
    n, m = len(points), net.dims.m
    if n < m:
        raise ValueError(f"orthogonality batch needs at least {m} points, got {n}")
    F_h = net.handle_root(L, surface)
    W = net.weights_at(L, np.asarray(points, dtype=np.float64), F_h)
    What = T.l2_normalize_columns(W)
    gram = T.matmul(T.transpose(What), What)
    mask = T.constant(1.0 - np.eye(m))
    return T.sum_all(T.mul(T.square(gram), mask))


# ---- conflict-free gradient combination ------------------------------


def config_combine(gradients):
    """Combine loss gradients into one conflict-free update direction.

    Unit-normalizes each gradient into rows of G_n, solves the Gram
    system G_n x = 1 (minimum-norm via the k x k normal equations), and
    scales the unit solution by the summed projections of the raw
    gradients.  The result keeps an equal, non-negative cosine with
    every participating gradient.  Zero gradients are dropped with a
    warning; returns (vector, warnings).
    """
    warnings = []
    gs = []
    for i, g in enumerate(gradients):
        g = np.asarray(g, dtype=np.float64).ravel()
        nrm = np.linalg.norm(g)
        if nrm == 0.0 or not np.isfinite(nrm):
            warnings.append(f"gradient {i} dropped (zero or non-finite)")
            continue
        gs.append(g)
    if not gs:
        raise ValueError("all gradients are zero")
    if len(gs) == 1:
        return gs[0].copy(), warnings
    Gn = np.stack([g / np.linalg.norm(g) for g in gs])
    k = len(gs)
    A = Gn @ Gn.T + CONFIG_GRAM_EPS * np.eye(k)
    x = Gn.T @ np.linalg.solve(A, np.ones(k))
    nx = np.linalg.norm(x)
    if nx < 1e-15:   # pathological (e.g. exactly antiparallel pair)
        warnings.append("degenerate gradient set, falling back to mean direction")
        x = Gn.mean(axis=0)
        nx = np.linalg.norm(x)
        if nx < 1e-15:
            return np.zeros_like(gs[0]), warnings
    g_u = x / nx
    scale = sum(g @ g_u for g in gs)
    return scale * g_u, warnings


class Adam:
    """Standard Adam with bias correction; lr supplied per step."""

    def __init__(self, dim, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


class Trainer:
    """Owns the training loop: batching, losses, ConFIG, Adam, logging.

    eval_points (typically the render vertices) are only used for the
    periodic quality metrics; training itself never sees them.
    """

    def __init__(self, net: SkinningNet, cubature, material: Material,
                 cfg: TrainConfig, log_path=None, eval_points=None,
                 checkpoint_path=None, surface=None):
        self.net = net
        self.cfg = cfg
        self.material = material
        self.points = np.asarray(cubature.points, dtype=np.float64)
        self.vol_w = np.asarray(cubature.volume_weight, dtype=np.float64)
        self.surface = surface
        kind = getattr(cubature, "kind", None)
        surf = (np.flatnonzero(np.asarray(kind) == 0)
                if kind is not None else np.arange(len(self.points)))
        # the orthogonality loss draws from surface samples only: quality
        # is measured on the rendered surface, and interior points sit so
        # far from orthogonal that they soak up most of the gradient
        # while moving nothing the metrics can see
        self.orth_pool = surf if len(surf) else np.arange(len(self.points))
        self.rng = np.random.default_rng(cfg.seed)
        self.adam = Adam(net.param_count)
        self.mu_z = cfg.mu_z
        self._halved = False
        self.log_path = log_path
        self._log_fh = None
        self.eval_points = None if eval_points is None else np.asarray(eval_points)
        self.checkpoint_path = checkpoint_path

    def _subsample(self, batch, pool=None):
        n = len(self.points) if pool is None else len(pool)
        if batch >= n:
            return np.arange(len(self.points)) if pool is None else pool
        picked = self.rng.choice(n, size=batch, replace=False)
        return picked if pool is None else pool[picked]

    def _loss_grad(self, build):
        """Forward/backward one loss on its own tape; returns (value, flat grad)."""
        tape = T.Tape()
        L = self.net.leaves(tape)
        out = build(L)
        grads = tape.backward(out)
        flat = self.net.grads_flat(tape, grads, L)
        return float(out.data[0]), flat

    def _step_once(self, it):
        cfg = self.cfg
        t = blend_schedule(it, cfg.total_iters)
        energy = BlendedEnergy(self.material, t)
        z = sample_subspace(cfg.z_batch, self.net.dims.m, self.mu_z, self.rng)

        idx = self._subsample(cfg.cubature_batch)
        w = self.vol_w[idx] * (len(self.points) / len(idx))
        v_pot, g_pot = self._loss_grad(
            lambda L: loss_pot(self.net, L, self.points[idx], w, z,
                               energy, cfg.h_fd, self.surface))

        idx = self._subsample(cfg.cubature_batch)
        v_smooth, g_smooth = self._loss_grad(
            lambda L: loss_smooth(self.net, L, self.points[idx],
                                  cfg.h_fd, self.surface))

        n_orth = orth_batch_schedule(it, cfg.total_iters, cfg.orth_batch)
        idx = self._subsample(max(n_orth, self.net.dims.m),
                              pool=self.orth_pool)
        v_orth, g_orth = self._loss_grad(
            lambda L: loss_orth(self.net, L, self.points[idx], self.surface))

        scaled = [cfg.lambda_pot * g_pot, g_smooth, cfg.lambda_orth * g_orth]
        combined, warnings = config_combine(scaled)
        lr = lr_schedule(it, cfg)
        self.net.set_flat(self.adam.update(self.net.flat(), combined, lr))

        names = ("pot", "smooth", "orth")
        norms = {k: float(np.linalg.norm(g)) for k, g in zip(names, scaled)}
        cn = np.linalg.norm(combined)
        cosines = {
            k: (float(g @ combined / (np.linalg.norm(g) * cn))
                if norms[k] > 0 and cn > 0 else 0.0)
            for k, g in zip(names, scaled)
        }
        return LossReport(iter=it, l_pot=v_pot, l_smooth=v_smooth, l_orth=v_orth,
                          blend=t, lr=lr, mu_z=self.mu_z,
                          grad_norms=norms, cosines=cosines)

    def train_step(self, it) -> LossReport:
        t0 = time.perf_counter()
        try:
            report = self._step_once(it)
        except FloatingPointError:
            if self._halved:
                raise
            # one retry with gentler subspace excitation
            self._halved = True
            self.mu_z *= 0.5
            report = self._step_once(it)
        report.step_ms = (time.perf_counter() - t0) * 1e3

        if (self.eval_points is not None and self.cfg.metrics_every > 0
                and (it % self.cfg.metrics_every == 0 or it == self.cfg.total_iters - 1)):
            fe = eval_field(self.net, self.eval_points, surface=self.surface)
            report.metrics = {k: float(v)
                              for k, v in weight_metrics(fe.weights).items()}
        self._log(report)
        return report

    def _log(self, report):
        if self.log_path is None:
            return
        if self._log_fh is None:
            self._log_fh = open(self.log_path, "a", encoding="utf-8")
        self._log_fh.write(report.to_json() + "\n")
        self._log_fh.flush()

    def _checkpoint(self, it):
        if self.checkpoint_path is None:
            return
        save_checkpoint(self.checkpoint_path, self.net, extra={"iter": it})

    def run(self, on_report=None, start_iter=0):
        """Full training loop; checkpoints periodically and on interrupt.

        start_iter > 0 resumes a run: schedules stay on absolute iteration
        numbers, so a resumed run continues where the checkpoint stopped.
        """
        cfg = self.cfg
        it = start_iter
        try:
            for it in range(start_iter, cfg.total_iters):
                report = self.train_step(it)
                if on_report is not None:
                    on_report(report)
                if cfg.checkpoint_every > 0 and (it + 1) % cfg.checkpoint_every == 0:
                    self._checkpoint(it)
        except KeyboardInterrupt:
            self._checkpoint(it)
            raise
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        self._checkpoint(cfg.total_iters - 1)
        return self.net
