"""Command-line interface.

Every command is a thin client over the HTTP service: by default the
FastAPI app is driven in-process (no socket), `--server URL` points the
same commands at a remote instance.  Exit codes: 0 ok, 1 internal
error, 2 invalid input or config.

PHYSKIN_THREADS caps the BLAS worker pools; it must take effect before
numpy is first imported, which is why this module defers all heavy
imports into the command bodies.
"""

import json
import os
import sys

_threads = os.environ.get("PHYSKIN_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import click

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


def _load_config(config_path, preset_name, mesh, out_dir):
    from pydantic import ValidationError

    from physkin.config import RunConfig, preset

    try:
        if config_path:
            cfg = RunConfig.from_file(config_path)
        else:
            cfg = preset(preset_name)
    except (ValidationError, ValueError, json.JSONDecodeError) as e:
        click.echo(f"invalid config: {e}", err=True)
        sys.exit(EXIT_INVALID)
    except FileNotFoundError as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_INVALID)
    if mesh:
        cfg.mesh = mesh
    if out_dir:
        cfg.out_dir = out_dir
    return cfg


def _client(server):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from physkin.service import create_app

    return TestClient(create_app(), raise_server_exceptions=False)


def _call(server, endpoint, payload):
    try:
        with _client(server) as client:
            resp = client.post(endpoint, json=payload)
    except KeyboardInterrupt:
        click.echo("interrupted", err=True)
        sys.exit(130)
    except Exception as e:
        click.echo(f"server unreachable: {e}", err=True)
        sys.exit(EXIT_INTERNAL)
    if resp.status_code == 200:
        click.echo(json.dumps(resp.json(), indent=1, sort_keys=True))
        sys.exit(EXIT_OK)
    try:
        detail = resp.json().get("detail", resp.text)
    except Exception:
        detail = resp.text
    click.echo(f"error ({resp.status_code}): {detail}", err=True)
    sys.exit(EXIT_INVALID if resp.status_code in (400, 422) else EXIT_INTERNAL)


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(),
                     default=None, help="RunConfig JSON file")(f)
    f = click.option("--preset", "preset_name", default="desk",
                     show_default=True, help="desk or paper")(f)
    f = click.option("--mesh", default=None, help="override mesh path")(f)
    f = click.option("--out", "out_dir", default=None,
                     help="override output directory")(f)
    f = click.option("--server", default=None,
                     help="remote service URL (default: in-process)")(f)
    return f


@click.group()
def main():
    """Neural-skinning subspace simulation toolkit."""


@main.command()
@_common
def sample(config_path, preset_name, mesh, out_dir, server):
    """Build and export the cubature point set."""
    cfg = _load_config(config_path, preset_name, mesh, out_dir)
    _call(server, "/api/sample", {"config": cfg.model_dump(mode="json")})


@main.command()
@_common
@click.option("--resume", default=None, help="checkpoint to continue from")
@click.option("--iters", type=int, default=None, help="override train.total_iters")
def train(config_path, preset_name, mesh, out_dir, server, resume, iters):
    """Train the skinning field; writes checkpoint + JSONL log."""
    cfg = _load_config(config_path, preset_name, mesh, out_dir)
    if iters is not None:
        cfg.train.total_iters = iters
    _call(server, "/api/train",
          {"config": cfg.model_dump(mode="json"), "resume": resume})


@main.command("eval")
@_common
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--handle", type=int, default=None,
              help="also export this handle's scaled weight field")
def eval_cmd(config_path, preset_name, mesh, out_dir, server, checkpoint, handle):
    """Metrics of a trained checkpoint on the mesh vertices."""
    cfg = _load_config(config_path, preset_name, mesh, out_dir)
    _call(server, "/api/eval",
          {"config": cfg.model_dump(mode="json"), "checkpoint": checkpoint,
           "handle": handle})


@main.command()
@_common
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--script", "script_path", type=click.Path(), default=None,
              help="JSON list of timed actions")
@click.option("--steps", type=int, default=60, show_default=True)
@click.option("--format", "frames_format", default="json",
              show_default=True, help="json or obj")
def animate(config_path, preset_name, mesh, out_dir, server, checkpoint,
            script_path, steps, frames_format):
    """Run a scripted simulation offline; writes frames + timing report."""
    cfg = _load_config(config_path, preset_name, mesh, out_dir)
    script = []
    if script_path:
        try:
            with open(script_path, "r", encoding="utf-8") as fh:
                script = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            click.echo(f"invalid script: {e}", err=True)
            sys.exit(EXIT_INVALID)
    _call(server, "/api/animate",
          {"config": cfg.model_dump(mode="json"), "checkpoint": checkpoint,
           "script": script, "steps": steps, "frames_format": frames_format})


@main.command()
@_common
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--port", type=int, default=None, help="override serve.port")
def serve(config_path, preset_name, mesh, out_dir, server, checkpoint, port):
    """Run the interactive streaming server (REST + /ws)."""
    if server:
        click.echo("serve runs locally; --server makes no sense here", err=True)
        sys.exit(EXIT_INVALID)
    cfg = _load_config(config_path, preset_name, mesh, out_dir)
    if port is not None:
        cfg.serve.port = port
    from physkin.service import serve_forever

    try:
        serve_forever(cfg, checkpoint)
    except (ValueError, FileNotFoundError) as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_INVALID)


@main.command()
@click.option("-o", "--out", default="docs/config.schema.json",
              show_default=True)
def schema(out):
    """Regenerate the published config schema document."""
    from physkin.config import export_schema

    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    export_schema(out)
    click.echo(out)


if __name__ == "__main__":
    main()
