"""Shared fixtures.

tiny_run: a fast 2-iteration training run on a down-scaled model, for
pipeline/service/CLI plumbing tests.  trained_run (in test_acceptance)
is the real 2000-iteration acceptance run and builds once per session.
"""

import pytest

from physkin.config import RunConfig


def tiny_config(out_dir: str) -> RunConfig:
    cfg = RunConfig()
    cfg.mesh = "assets/beam.obj"
    cfg.out_dir = out_dir
    cfg.cubature.surface_count = 96
    cfg.cubature.grid_res = 8
    cfg.model.m = 4
    cfg.model.M = 4
    cfg.model.d = 16
    cfg.model.L_enc = 1
    cfg.model.L_pe = 3
    cfg.model.d_h = 16
    cfg.model.mlp_depth = 1
    cfg.model.heads = 2
    cfg.train.total_iters = 2
    cfg.train.z_batch = 4
    cfg.train.cubature_batch = 64
    cfg.train.orth_batch = 128
    cfg.train.checkpoint_every = 0
    cfg.train.metrics_every = 0
    cfg.sim.sim_points_cap = 256
    cfg.sim.hessian_points = 128
    return cfg


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """(config, checkpoint path) of a tiny trained model."""
    from physkin.pipeline import run_train

    cfg = tiny_config(str(tmp_path_factory.mktemp("tiny")))
    res = run_train(cfg)
    return cfg, res["checkpoint"]
