"""Command-line client for the binrep service.

Every subcommand speaks the HTTP API: against a remote server when
--server is given, otherwise against an in-process instance of the app.
"""

import json
import sys

import click
import httpx


def _client(server):
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient
    from .service import app
    return TestClient(app)


def _post(server, path, payload):
    payload = {k: v for k, v in payload.items() if v is not None}
    with _client(server) as client:
        resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        click.echo(f"error ({resp.status_code}): {detail}", err=True)
        sys.exit(1)
    body = resp.json()
    click.echo(json.dumps(body, indent=2))
    return body


server_opt = click.option("--server", default=None,
                          help="Remote service URL (default: in-process)")


def dataset_opts(f):
    f = click.option("--dataset", default="mnist",
                     type=click.Choice(["mnist", "cifar10"]))(f)
    f = click.option("--data-dir", default=None,
                     help="Dataset directory (or set BINREP_DATA_DIR)")(f)
    return f


def arch_opts(f):
    f = click.option("--preset", default=None,
                     help="Architecture preset (default chosen per dataset)")(f)
    f = click.option("--width-mult", default=1.0, type=float)(f)
    f = click.option("--binarize-layers", default="last",
                     help="'all', 'last', 'none', or 0/1 per activation layer")(f)
    return f


@click.group()
def main():
    """Binary-representation training and packed inference."""


@main.command()
@server_opt
@dataset_opts
@arch_opts
@click.option("--phase1-lambda", default=1e-4, type=float)
@click.option("--phase2-lambda", default=1e-2, type=float)
@click.option("--epochs1", default=10, type=int)
@click.option("--epochs2", default=10, type=int)
@click.option("--lr", default=0.05, type=float)
@click.option("--momentum", default=0.9, type=float)
@click.option("--weight-decay", default=0.0, type=float)
@click.option("--batch-size", default=64, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--center-init", is_flag=True, default=False,
              help="Center pre-activations on a training batch at init")
@click.option("--finetune-head-epochs", default=0, type=int)
@click.option("--ternarize", is_flag=True, default=False)
@click.option("--ternarize-epochs", default=8, type=int)
@click.option("--out", default="runs/default")
def train(server, **kwargs):
    """Two-phase training; writes checkpoint + metrics CSVs."""
    _post(server, "/train", kwargs)


@main.command("eval")
@server_opt
@dataset_opts
@arch_opts
@click.argument("checkpoint")
@click.option("--mode", default="linear", type=click.Choice(["linear", "step"]))
@click.option("--out", default=None)
def eval_cmd(server, checkpoint, **kwargs):
    """Top-1 accuracy of a checkpoint in linear or step mode."""
    _post(server, "/eval", {"checkpoint": checkpoint, **kwargs})


@main.command()
@server_opt
@dataset_opts
@arch_opts
@click.argument("checkpoint")
@click.option("--layer", default=None, help="Rectifier to analyze (default: last)")
@click.option("--tau-pos", default=0.95, type=float)
@click.option("--tau-neg", default=0.05, type=float)
@click.option("--out", default="runs/analysis")
def analyze(server, checkpoint, **kwargs):
    """Firing matrix and positive/negative class splits."""
    _post(server, "/analyze", {"checkpoint": checkpoint, **kwargs})


@main.command()
@server_opt
@dataset_opts
@arch_opts
@click.argument("checkpoint")
@click.option("--out", default="runs/export")
def export(server, checkpoint, **kwargs):
    """Export a frozen ternary model to the bit-packed format."""
    _post(server, "/export", {"checkpoint": checkpoint, **kwargs})


@main.command()
@server_opt
@dataset_opts
@click.argument("model")
@click.option("--out", default="runs/infer")
def infer(server, model, **kwargs):
    """Run the packed engine over a test split; writes timing CSV."""
    _post(server, "/infer", {"model": model, **kwargs})


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn
    from .service import app
    uvicorn.run(app, host=host, port=port)


@main.command()
@click.option("--dataset", default="mnist", type=click.Choice(["mnist", "cifar10"]))
@click.option("--out", required=True)
@click.option("--n-train", default=6000, type=int)
@click.option("--n-test", default=1000, type=int)
@click.option("--seed", default=0, type=int)
def datagen(dataset, out, n_train, n_test, seed):
    """Generate stand-in data in the real MNIST/CIFAR-10 file formats."""
    from . import synth
    if dataset == "mnist":
        synth.make_mnist_like(out, n_train, n_test, seed)
    else:
        synth.make_cifar10_like(out, n_train, n_test, seed)
    click.echo(f"wrote {dataset}-like data to {out}")


if __name__ == "__main__":
    main()
