"""Run configuration: one validated document that drives every command.

Pydantic models with unknown keys rejected; the JSON schema exported to
docs/config.schema.json is generated from these classes (make docs-schema
or ConfigDoc.export_schema).  Two presets ship: "desk" (CPU-friendly
batch sizes, the default) and "paper" (the published batch sizes).
"""

from __future__ import annotations

import json

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CubatureConfig(_Strict):
    surface_count: int = Field(3072, ge=1)
    grid_res: int = Field(24, ge=2)
    tau: float = Field(0.02, gt=0)
    seed: int = 0
    surface_only: bool | None = None
    # append render vertices as surface samples so the trained field is
    # optimized on the exact points the quality metrics measure
    include_vertices: bool = True


class ModelConfig(_Strict):
    m: int = Field(8, ge=2)
    M: int = Field(16, ge=1)
    d: int = Field(64, ge=4)
    L_enc: int = Field(2, ge=0)
    L_pe: int = Field(6, ge=0)
    d_h: int = Field(64, ge=4)
    mlp_depth: int = Field(3, ge=1)
    heads: int = Field(4, ge=1)
    per_object: bool = True
    seed: int = 0


class TrainSection(_Strict):
    total_iters: int = Field(2000, ge=1)
    z_batch: int = Field(64, ge=1)
    cubature_batch: int = Field(512, ge=1)
    # orthogonality batch; large because that estimator carries a 1/n
    # noise floor (clamped to the surface pool when the pool is smaller)
    orth_batch: int = Field(4096, ge=1)
    mu_z: float = Field(0.2, gt=0)
    lambda_pot: float = 1.0
    lambda_orth: float = 1.0
    lr_max: float = Field(5e-4, gt=0)
    lr_min: float = Field(5e-5, gt=0)
    warmup_fraction: float = Field(0.01, ge=0, le=0.5)
    seed: int = 0
    checkpoint_every: int = Field(500, ge=0)
    metrics_every: int = Field(200, ge=0)

    @model_validator(mode="after")
    def _lr_order(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        return self


class MaterialConfig(_Strict):
    youngs_modulus: float = Field(1e4, gt=0)
    poisson: float = Field(0.45, ge=0, lt=0.5)
    density: float = Field(1e3, gt=0)


class SimConfig(_Strict):
    h: float = Field(1.0 / 60.0, gt=0)
    damping: float = Field(0.01, ge=0)
    pin_stiffness: float = Field(1e5, gt=0)
    newton_tol: float = Field(1e-2, gt=0)
    newton_max_iters: int = Field(10, ge=1)
    hessian_points: int | None = Field(1024, ge=1)
    sim_points_cap: int | None = Field(4096, ge=1)
    gravity: tuple[float, float, float] = (0.0, -9.8, 0.0)


class ServeConfig(_Strict):
    host: str = "127.0.0.1"
    port: int = Field(8787, ge=1, le=65535)
    frame_rate: float = Field(30.0, gt=0)


class RunConfig(_Strict):
    """The full document; every command reads the sections it needs."""

    mesh: str = "assets/beam.obj"
    out_dir: str = "out"
    cubature: CubatureConfig = CubatureConfig()
    model: ModelConfig = ModelConfig()
    train: TrainSection = TrainSection()
    material: MaterialConfig = MaterialConfig()
    sim: SimConfig = SimConfig()
    serve: ServeConfig = ServeConfig()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.model_validate(json.load(fh))

    def to_model_dims(self):
        from physkin.model import ModelDims

        mc = self.model
        return ModelDims(m=mc.m, M=mc.M, d=mc.d, L_enc=mc.L_enc,
                         L_pe=mc.L_pe, d_h=mc.d_h, mlp_depth=mc.mlp_depth,
                         heads=mc.heads)

    def to_train_config(self):
        from physkin.training import TrainConfig

        t = self.train
        return TrainConfig(total_iters=t.total_iters, z_batch=t.z_batch,
                           cubature_batch=t.cubature_batch,
                           orth_batch=t.orth_batch, mu_z=t.mu_z,
                           lambda_pot=t.lambda_pot, lambda_orth=t.lambda_orth,
                           lr_max=t.lr_max, lr_min=t.lr_min,
                           warmup_fraction=t.warmup_fraction, seed=t.seed,
                           checkpoint_every=t.checkpoint_every,
                           metrics_every=t.metrics_every)

    def to_material(self):
        from physkin.elasticity import Material

        m = self.material
        return Material(youngs_modulus=m.youngs_modulus, poisson=m.poisson,
                        density=m.density)

    def to_sim_options(self):
        from physkin.dynamics import SimOptions

        s = self.sim
        return SimOptions(gamma=s.damping, newton_tol=s.newton_tol,
                          newton_max_iters=s.newton_max_iters,
                          hessian_points=s.hessian_points,
                          sim_points_cap=s.sim_points_cap,
                          gravity=s.gravity)


def preset(name: str) -> RunConfig:
    """Named starting points; "desk" is what the defaults already say."""
    if name == "desk":
        return RunConfig()
    if name == "paper":
        cfg = RunConfig()
        cfg.train.z_batch = 1024
        cfg.cubature.surface_count = 4096
        cfg.cubature.grid_res = 32
        return cfg
    raise ValueError(f"unknown preset {name!r} (have: desk, paper)")


def export_schema(path) -> None:
    schema = RunConfig.model_json_schema()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=2, sort_keys=True)
        fh.write("\n")
