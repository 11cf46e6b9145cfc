"""Offline commands behind the CLI/service: sample, train, eval, animate.

Each function takes a validated RunConfig (plus command-specific inputs),
performs the work, writes artifacts under cfg.out_dir, and returns a
JSON-ready summary dict.  No partial output on invalid input: every
entry point validates everything it needs before touching the disk.
"""

import json
import os

import numpy as np

from physkin.config import RunConfig
from physkin.dynamics import assemble_operators, init_state, step
from physkin.geometry import (
    CubatureSet,
    build_cubature,
    load_obj,
    normalize_unit_cube,
)
from physkin.metrics import weight_metrics
from physkin.model import SkinningNet, eval_field, load_checkpoint
from physkin.training import Trainer


def _load_mesh(cfg: RunConfig):
    mesh = load_obj(cfg.mesh)
    return normalize_unit_cube(mesh)


def _ensure_out(cfg: RunConfig):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _build_cubature(cfg: RunConfig, mesh):
    c = cfg.cubature
    cub = build_cubature(mesh, surface_count=c.surface_count,
                         grid_res=c.grid_res, tau=c.tau, seed=c.seed,
                         surface_only=c.surface_only)
    if not c.include_vertices:
        return cub
    # append render vertices as extra surface samples, sharing the
    # thin-shell budget so the integrated volume stays put
    nv = len(mesh.vertices)
    surf = cub.kind == 0
    shell = cub.volume_weight[surf].sum()
    w_each = shell / (int(surf.sum()) + nv)
    vw = cub.volume_weight.copy()
    vw[surf] = w_each
    return CubatureSet(
        points=np.concatenate([cub.points, mesh.vertices]),
        kind=np.concatenate([cub.kind, np.zeros(nv, dtype=np.int8)]),
        volume_weight=np.concatenate([vw, np.full(nv, w_each)]),
        normals=np.concatenate([cub.normals, np.zeros((nv, 3))]),
    )


def run_sample(cfg: RunConfig, out_path=None) -> dict:
    mesh, _ = _load_mesh(cfg)
    from physkin.geometry import is_watertight

    if cfg.cubature.surface_only is not True and not is_watertight(mesh):
        # the command surface refuses to guess; the config must opt in
        raise ValueError(
            f"{cfg.mesh} is an open shell: interior sampling is impossible. "
            "Set cubature.surface_only=true to sample the surface only.")
    cub = _build_cubature(cfg, mesh)
    out_dir = _ensure_out(cfg)
    path = out_path or os.path.join(out_dir, "cubature.json")
    payload = json.dumps(cub.to_dict(), sort_keys=True, indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(payload + "\n")
    kinds = cub.kind
    return {
        "path": path,
        "points": int(len(cub.points)),
        "surface": int((kinds == 0).sum()),
        "interior": int((kinds == 1).sum()),
        "volume": float(cub.volume_weight.sum()),
    }


def run_train(cfg: RunConfig, resume=None, on_report=None) -> dict:
    mesh, _ = _load_mesh(cfg)
    cub = _build_cubature(cfg, mesh)
    out_dir = _ensure_out(cfg)
    dims = cfg.to_model_dims()
    start_iter = 0
    if resume:
        net, header = load_checkpoint(resume)
        if net.dims.to_dict() != dims.to_dict():
            raise ValueError(
                f"checkpoint dims {net.dims.to_dict()} do not match config {dims.to_dict()}")
        start_iter = int(header.get("extra", {}).get("iter", -1)) + 1
    else:
        net = SkinningNet(dims, per_object=cfg.model.per_object,
                          seed=cfg.model.seed)
    tcfg = cfg.to_train_config()
    ckpt = os.path.join(out_dir, "model.ckpt")
    log = os.path.join(out_dir, "train_log.jsonl")
    trainer = Trainer(net, cub, cfg.to_material(), tcfg,
                      log_path=log, eval_points=mesh.vertices,
                      checkpoint_path=ckpt)
    trainer.run(on_report=on_report, start_iter=start_iter)
    fe = eval_field(net, mesh.vertices)
    metrics = {k: float(v) for k, v in weight_metrics(fe.weights).items()}
    return {"checkpoint": ckpt, "log": log, "iters": tcfg.total_iters,
            "start_iter": start_iter, "metrics": metrics}


def run_eval(cfg: RunConfig, checkpoint, handle=None) -> dict:
    mesh, _ = _load_mesh(cfg)
    net, _ = load_checkpoint(checkpoint)
    fe = eval_field(net, mesh.vertices)
    W = fe.weights
    report = {k: float(v) for k, v in weight_metrics(W).items()}
    report["K"] = int(W.shape[1])
    report["N"] = int(W.shape[0])
    out_dir = _ensure_out(cfg)
    path = os.path.join(out_dir, "metrics.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    result = {"path": path, **report}
    if handle is not None:
        if not (0 <= handle < W.shape[1]):
            raise ValueError(f"handle {handle} out of range [0, {W.shape[1]})")
        # per-vertex scalar field scaled into [-1, 1] for colormapping
        col = W[:, handle]
        denom = np.abs(col).max() or 1.0
        field_path = os.path.join(out_dir, f"handle_{handle:02d}.json")
        with open(field_path, "w", encoding="utf-8") as fh:
            json.dump({"handle": int(handle),
                       "values": (col / denom).tolist()}, fh)
            fh.write("\n")
        result["handle_field"] = field_path
    return result


# ---- scripted animation ------------------------------------------------


def _script_error(path, msg):
    raise ValueError(f"animation script {path}: {msg}")


def parse_script(script) -> list:
    """Validate [{t, action, ...}] entries, sorted by time."""
    if not isinstance(script, list):
        raise ValueError("animation script: expected a JSON list")
    out = []
    for i, entry in enumerate(script):
        where = f"script[{i}]"
        if not isinstance(entry, dict):
            _script_error(where, "expected an object")
        if "t" not in entry or not isinstance(entry["t"], (int, float)):
            _script_error(where + ".t", "missing or non-numeric time")
        action = entry.get("action")
        if action not in ("pin", "drag", "release", "gravity"):
            _script_error(where + ".action",
                          f"unknown action {action!r} "
                          "(expected pin/drag/release/gravity)")
        e = dict(entry)
        if action in ("pin", "drag"):
            tgt = e.get("target")
            if (not isinstance(tgt, (list, tuple)) or len(tgt) != 3
                    or not all(isinstance(v, (int, float)) for v in tgt)):
                _script_error(where + ".target", "expected [x, y, z]")
            if action == "pin":
                if not isinstance(e.get("vertex"), int):
                    _script_error(where + ".vertex", "expected a vertex index")
            else:
                pt = e.get("point")
                if (not isinstance(pt, (list, tuple)) or len(pt) != 3
                        or not all(isinstance(v, (int, float)) for v in pt)):
                    _script_error(where + ".point", "expected [x, y, z]")
                if not isinstance(e.get("id"), int):
                    _script_error(where + ".id", "expected an integer drag id")
        elif action == "release":
            if not isinstance(e.get("id"), int):
                _script_error(where + ".id", "expected an integer id")
        elif action == "gravity":
            g = e.get("g")
            if (not isinstance(g, (list, tuple)) or len(g) != 3
                    or not all(isinstance(v, (int, float)) for v in g)):
                _script_error(where + ".g", "expected [gx, gy, gz]")
        out.append(e)
    return sorted(out, key=lambda e: e["t"])


class SimSession:
    """One live reduced simulation: a trained field bound to a mesh.

    gravity=None takes the config value (interactive serving); the
    offline animate path passes (0,0,0) so an empty script is exactly
    the identity and scripts opt into gravity explicitly.
    """

    def __init__(self, cfg: RunConfig, checkpoint, gravity=None):
        self.cfg = cfg
        mesh, _ = _load_mesh(cfg)
        self.mesh = mesh
        net, _ = load_checkpoint(checkpoint)
        self.net = net
        cub = _build_cubature(cfg, mesh)
        options = cfg.to_sim_options()
        if gravity is not None:
            options.gravity = tuple(gravity)
        self.system = assemble_operators(
            field=eval_field(net, cub.points, with_grads=True),
            cubature=cub, material=cfg.to_material(),
            options=options,
            weight_fn=lambda P: eval_field(net, P).weights)
        self.options = options
        self.h = cfg.sim.h
        self.vertex_weights = eval_field(net, mesh.vertices).weights
        self.state = init_state(self.system, self.h)
        self.step_index = 0

    def reset(self):
        self.system.clear_all()
        self.state = init_state(self.system, self.h)
        self.step_index = 0

    def vertex_positions(self, z=None):
        z = self.state.z if z is None else z
        return self.system.deform(self.mesh.vertices, z,
                                  W=self.vertex_weights)

    def advance(self):
        self.state, stats = step(self.system, self.state, self.options)
        self.step_index += 1
        return stats

    def apply_script_entry(self, e, pins, drags):
        if e["action"] == "pin":
            pins[e["vertex"]] = self.system.set_pin(
                int(e["vertex"]), np.asarray(e["target"], dtype=np.float64),
                stiffness=e.get("stiffness", self.cfg.sim.pin_stiffness))
        elif e["action"] == "drag":
            if e["id"] in drags:
                self.system.move_drag(drags[e["id"]],
                                      np.asarray(e["target"], dtype=np.float64))
            else:
                drags[e["id"]] = self.system.set_drag(
                    np.asarray(e["point"], dtype=np.float64),
                    np.asarray(e["target"], dtype=np.float64),
                    stiffness=e.get("stiffness", self.cfg.sim.pin_stiffness))
        elif e["action"] == "release":
            if e["id"] in drags:
                self.system.clear_drag(drags.pop(e["id"]))
        elif e["action"] == "gravity":
            self.system.set_gravity(np.asarray(e["g"], dtype=np.float64))


def _write_frame_obj(path, positions, faces):
    with open(path, "w", encoding="utf-8") as fh:
        for p in positions:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def run_animate(cfg: RunConfig, checkpoint, script, steps=60,
                frames_format="json") -> dict:
    """Offline scripted run; deterministic for a fixed config and script."""
    entries = parse_script(script)
    if frames_format not in ("json", "obj"):
        raise ValueError(f"frames_format must be json or obj, got {frames_format!r}")
    session = SimSession(cfg, checkpoint, gravity=(0.0, 0.0, 0.0))
    out_dir = _ensure_out(cfg)
    pins, drags = {}, {}
    pending = list(entries)
    frames = []
    solve_ms = []
    for k in range(steps):
        t = k * session.h
        while pending and pending[0]["t"] <= t + 1e-12:
            session.apply_script_entry(pending.pop(0), pins, drags)
        stats = session.advance()
        solve_ms.append(stats.solve_ms)
        pos = session.vertex_positions()
        if frames_format == "obj":
            fp = os.path.join(out_dir, f"frame_{k:05d}.obj")
            _write_frame_obj(fp, pos, session.mesh.faces)
            frames.append(fp)
        else:
            frames.append({
                "step": k,
                "t": round((k + 1) * session.h, 12),
                "z": [round(float(v), 12) for v in session.state.z],
                "positions": [round(float(v), 9) for v in pos.ravel()],
            })
    timing = {
        "vertex_count": int(len(session.mesh.vertices)),
        "steps": int(steps),
        "mean_ms": float(np.mean(solve_ms)),
        "p95_ms": float(np.percentile(solve_ms, 95)),
    }
    timing_path = os.path.join(out_dir, "timing.json")
    with open(timing_path, "w", encoding="utf-8") as fh:
        json.dump(timing, fh, sort_keys=True, indent=1)
        fh.write("\n")
    result = {"timing": timing, "timing_path": timing_path, "steps": steps}
    if frames_format == "obj":
        result["frames"] = frames
    else:
        frames_path = os.path.join(out_dir, "frames.json")
        with open(frames_path, "w", encoding="utf-8") as fh:
            json.dump({"frames": frames}, fh, sort_keys=True,
                      separators=(",", ":"))
            fh.write("\n")
        result["frames_path"] = frames_path
    return result
