"""Offline pipeline commands: sample, train artifacts, eval, animate."""

import json
import os

import numpy as np
import pytest

from physkin.config import RunConfig
from physkin.pipeline import (
    parse_script,
    run_animate,
    run_eval,
    run_sample,
)
from tests.conftest import tiny_config


def test_sample_writes_cubature(tmp_path):
    cfg = tiny_config(str(tmp_path))
    res = run_sample(cfg)
    assert os.path.exists(res["path"])
    data = json.loads(open(res["path"]).read())
    assert len(data["points"]) == res["points"]
    assert res["surface"] + res["interior"] == res["points"]
    assert res["volume"] > 0

def test_sample_same_seed_byte_identical(tmp_path):
    cfg = tiny_config(str(tmp_path))
    a = run_sample(cfg, out_path=str(tmp_path / "a.json"))
    b = run_sample(cfg, out_path=str(tmp_path / "b.json"))
    assert open(a["path"], "rb").read() == open(b["path"], "rb").read()

def test_sample_open_shell_is_an_error(tmp_path):
    quad = tmp_path / "quad.obj"
    quad.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                    "f 1 2 3\nf 1 3 4\n")
    cfg = tiny_config(str(tmp_path))
    cfg.mesh = str(quad)
    with pytest.raises(ValueError, match="surface_only"):
        run_sample(cfg)
    # explicit opt-in works
    cfg.cubature.surface_only = True
    res = run_sample(cfg)
    assert res["interior"] == 0

def test_sample_include_vertices_appends(tmp_path):
    cfg = tiny_config(str(tmp_path))
    cfg.cubature.include_vertices = False
    base = run_sample(cfg, out_path=str(tmp_path / "base.json"))
    cfg.cubature.include_vertices = True
    aug = run_sample(cfg, out_path=str(tmp_path / "aug.json"))
    assert aug["points"] == base["points"] + 1244
    assert aug["volume"] == pytest.approx(base["volume"], rel=1e-9)


def test_train_artifacts_and_resume(tiny_run, tmp_path):
    cfg, ckpt = tiny_run
    assert os.path.exists(ckpt)
    log = os.path.join(cfg.out_dir, "train_log.jsonl")
    lines = open(log).read().strip().splitlines()
    assert len(lines) == cfg.train.total_iters
    for ln in lines:
        rec = json.loads(ln)
        assert all(np.isfinite(v) for v in
                   (rec["l_pot"], rec["l_smooth"], rec["l_orth"]))

    # resume continues iteration numbering
    from physkin.pipeline import run_train

    cfg2 = RunConfig.model_validate(cfg.model_dump())
    cfg2.out_dir = str(tmp_path)
    cfg2.train.total_iters = 4
    res = run_train(cfg2, resume=ckpt)
    assert res["start_iter"] == cfg.train.total_iters
    lines = open(res["log"]).read().strip().splitlines()
    iters = [json.loads(ln)["iter"] for ln in lines]
    assert iters == [2, 3]

def test_train_resume_dims_mismatch(tiny_run, tmp_path):
    cfg, ckpt = tiny_run
    from physkin.pipeline import run_train

    cfg2 = RunConfig.model_validate(cfg.model_dump())
    cfg2.out_dir = str(tmp_path)
    cfg2.model.m = 6
    with pytest.raises(ValueError, match="dims"):
        run_train(cfg2, resume=ckpt)


def test_eval_reports_metrics(tiny_run):
    cfg, ckpt = tiny_run
    res = run_eval(cfg, ckpt)
    assert 0.0 <= res["omega_orth"] <= 1.0
    assert res["kappa_log"] >= 1.0
    assert 0.0 <= res["h_spec"] <= 1.0
    assert res["K"] == cfg.model.m and res["N"] == 1244
    assert os.path.exists(res["path"])

def test_eval_handle_field_in_bounds(tiny_run):
    cfg, ckpt = tiny_run
    res = run_eval(cfg, ckpt, handle=1)
    field = json.loads(open(res["handle_field"]).read())
    vals = np.asarray(field["values"])
    assert len(vals) == 1244
    assert np.abs(vals).max() <= 1.0 + 1e-12

def test_eval_handle_out_of_range(tiny_run):
    cfg, ckpt = tiny_run
    with pytest.raises(ValueError, match="out of range"):
        run_eval(cfg, ckpt, handle=99)


# ---- animation scripts ---------------------------------------------------


def test_parse_script_errors_name_path():
    with pytest.raises(ValueError, match=r"script\[0\]\.action"):
        parse_script([{"t": 0, "action": "explode"}])
    with pytest.raises(ValueError, match=r"script\[1\]\.target"):
        parse_script([{"t": 0, "action": "gravity", "g": [0, -9.8, 0]},
                      {"t": 1, "action": "pin", "vertex": 0, "target": "up"}])
    with pytest.raises(ValueError, match=r"script\[0\]\.id"):
        parse_script([{"t": 0, "action": "release"}])
    with pytest.raises(ValueError, match="JSON list"):
        parse_script({"t": 0})

def test_parse_script_sorts_by_time():
    out = parse_script([{"t": 1.0, "action": "release", "id": 1},
                        {"t": 0.0, "action": "gravity", "g": [0, 0, 0]}])
    assert [e["t"] for e in out] == [0.0, 1.0]


def test_animate_empty_script_is_identity(tiny_run):
    cfg, ckpt = tiny_run
    res = run_animate(cfg, ckpt, [], steps=5)
    frames = json.loads(open(res["frames_path"]).read())["frames"]
    assert len(frames) == 5
    from physkin.geometry import load_obj, normalize_unit_cube

    mesh, _ = normalize_unit_cube(load_obj(cfg.mesh))
    for fr in frames:
        assert np.abs(np.asarray(fr["z"])).max() == 0.0
        pos = np.asarray(fr["positions"]).reshape(-1, 3)
        np.testing.assert_allclose(pos, mesh.vertices, atol=1e-9)
    t = res["timing"]
    assert t["vertex_count"] == 1244 and t["mean_ms"] > 0 and t["p95_ms"] > 0

def test_animate_bit_reproducible(tiny_run, tmp_path):
    cfg, ckpt = tiny_run
    script = [{"t": 0.0, "action": "gravity", "g": [0.0, -9.8, 0.0]},
              {"t": 0.0, "action": "pin", "vertex": 0,
               "target": [-1.0, 0.25, 0.25]}]
    cfg_a = RunConfig.model_validate(cfg.model_dump())
    cfg_a.out_dir = str(tmp_path / "a")
    cfg_b = RunConfig.model_validate(cfg.model_dump())
    cfg_b.out_dir = str(tmp_path / "b")
    ra = run_animate(cfg_a, ckpt, script, steps=10)
    rb = run_animate(cfg_b, ckpt, script, steps=10)
    assert (open(ra["frames_path"], "rb").read()
            == open(rb["frames_path"], "rb").read())

def test_animate_obj_frames(tiny_run, tmp_path):
    cfg2 = RunConfig.model_validate(tiny_run[0].model_dump())
    cfg2.out_dir = str(tmp_path)
    res = run_animate(cfg2, tiny_run[1], [], steps=3, frames_format="obj")
    assert [os.path.basename(p) for p in res["frames"]] == [
        "frame_00000.obj", "frame_00001.obj", "frame_00002.obj"]
    head = open(res["frames"][0]).readline()
    assert head.startswith("v ")

def test_animate_rejects_bad_format(tiny_run):
    cfg, ckpt = tiny_run
    with pytest.raises(ValueError, match="frames_format"):
        run_animate(cfg, ckpt, [], steps=2, frames_format="gif")
