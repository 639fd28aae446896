"""Thin command-line client of the locrom service.

Every subcommand builds a request from a config file plus flag overrides and
sends it through the HTTP API: against a remote server when --url is given,
otherwise against an in-process instance of the app. Returned CSV payloads
are written under --out.
"""

import json
from pathlib import Path

import click
import yaml


def _client(url):
    if url:
        import httpx

        return httpx.Client(base_url=url, timeout=None)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _request_body(config_path, seed, n_mpe, basis, training_set, out):
    body = {}
    if config_path:
        with open(config_path) as fh:
            body = yaml.safe_load(fh) or {}
    if seed is not None:
        body["seed"] = seed
    if n_mpe:
        body["n_mpe"] = list(n_mpe)
    if basis:
        body["basis"] = basis
    if training_set:
        body["training_set"] = training_set
    if out:
        body["out"] = out
    return body


def _post(client, path, body):
    response = client.post(path, json=body)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except Exception:
            detail = response.text
        raise click.ClickException(f"{path} failed ({response.status_code}): {detail}")
    return response.json()


def _write_csv(payload, out, name):
    if payload.get("csv") and out:
        path = Path(out) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(payload["csv"])
        click.echo(f"wrote {path}")


_shared = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 help="experiment config file (YAML key-value + arrays)"),
    click.option("--seed", type=int, default=None),
    click.option("--n-mpe", "n_mpe", type=int, multiple=True,
                 help="modes per edge (repeatable)"),
    click.option("--basis", type=click.Choice(["empirical", "hierarchical"]),
                 default=None),
    click.option("--training-set", type=click.Choice(["soi", "random"]),
                 default=None),
    click.option("--out", type=click.Path(), default=None),
]


def shared_options(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


@click.group()
@click.option("--url", default=None,
              help="service URL; default runs the service in-process")
@click.pass_context
def main(ctx, url):
    """Localized model order reduction experiments."""
    ctx.obj = url


@main.command()
@shared_options
@click.pass_obj
def offline(url, config_path, seed, n_mpe, basis, training_set, out):
    """Train the local bases for every oversampling configuration."""
    body = _request_body(config_path, seed, n_mpe, basis, training_set, out)
    payload = _post(_client(url), "/offline", body)
    click.echo(f"offline {payload['hash']}: {payload['n_configurations']} configurations")
    for c in payload["configurations"]:
        click.echo(f"  cfg{c['index']:03d} {c['key']}: {c['n_snapshots']} snapshots "
                   f"({c['n_soi']} soi, {c['n_random']} random), "
                   f"modes {c['modes_per_edge']}")


@main.command()
@shared_options
@click.pass_obj
def fom(url, config_path, seed, n_mpe, basis, training_set, out):
    """Solve the full order model baseline."""
    body = _request_body(config_path, seed, n_mpe, basis, training_set, out)
    payload = _post(_client(url), "/fom", body)
    click.echo(f"fom {payload['hash']}: {payload['n_dofs']} DoFs, "
               f"energy norm {payload['global_norm']:.6e}")


@main.command()
@shared_options
@click.pass_obj
def online(url, config_path, seed, n_mpe, basis, training_set, out):
    """Assemble and solve the ROM from persisted artifacts; report errors."""
    body = _request_body(config_path, seed, n_mpe, basis, training_set, out)
    payload = _post(_client(url), "/online", body)
    for row in payload["rows"]:
        click.echo(f"n_mpe={row['n_mpe']:3d} N={row['N_dofs']:6d} "
                   f"abs={row['abs_err']:.4e} rel={row['rel_err']:.4e}")
    _write_csv(payload, body.get("out"), "errors.csv")


@main.command()
@shared_options
@click.pass_obj
def compare(url, config_path, seed, n_mpe, basis, training_set, out):
    """Full pipeline: offline, FOM and online error comparison."""
    body = _request_body(config_path, seed, n_mpe, basis, training_set, out)
    payload = _post(_client(url), "/compare", body)
    click.echo(f"compare {payload['hash']}: FOM {payload['fom']['n_dofs']} DoFs")
    for row in payload["online"]["rows"]:
        click.echo(f"n_mpe={row['n_mpe']:3d} N={row['N_dofs']:6d} "
                   f"abs={row['abs_err']:.4e} rel={row['rel_err']:.4e}")
    _write_csv(payload["online"], body.get("out"), "errors.csv")


@main.command("projection-study")
@shared_options
@click.pass_obj
def projection_study(url, config_path, seed, n_mpe, basis, training_set, out):
    """Local projection-error study of empirical and spectral bases."""
    body = _request_body(config_path, seed, n_mpe, basis, training_set, out)
    body.setdefault("experiment", "projection_study")
    payload = _post(_client(url), "/projection-study", body)
    for row in payload["rows"]:
        click.echo(f"{row['basis']:9s} {row['training_set']:6s} "
                   f"{row['testing_set']:6s} n={row['n_local']:3d} "
                   f"N={row['N_dofs']:5d} err={row['max_rel_proj_err']:.4e}")
    _write_csv(payload, body.get("out"), "projection.csv")


@main.command()
@click.option("--out", type=click.Path(), required=True,
              help="results directory to report on")
@click.pass_obj
def report(url, out):
    """Print stored CSVs and manifests of a finished run."""
    payload = _post(_client(url), "/report", {"out": out})
    for name, text in payload["files"].items():
        click.echo(f"--- {name} ---")
        click.echo(text.rstrip())


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    """Run the service with uvicorn."""
    import uvicorn

    uvicorn.run("locrom.service:app", host=host, port=port)


if __name__ == "__main__":
    main()
