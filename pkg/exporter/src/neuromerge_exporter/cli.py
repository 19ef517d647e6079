"""Exporter command line: checkpoints and datasets into the portable format."""

from __future__ import annotations

import sys

import click

from .archs import ARCHITECTURES
from .datasets import LOADERS, export_dataset
from .export import ExportError, export_model


@click.group(name="neuromerge-export")
def cli():
    """Convert trained PyTorch checkpoints and evaluation data."""


@cli.command(name="export-model")
@click.option("--arch", required=True, type=click.Choice(sorted(ARCHITECTURES)))
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--classes", default=10, type=int, help="Classifier width of the checkpoint.")
@click.option("--check-count", default=10, type=int,
              help="Random inputs for the forward agreement check.")
@click.option("--seed", default=0, type=int)
def export_model_cmd(arch, ckpt, out_dir, classes, check_count, seed):
    """Convert a checkpoint; fails unless toolkit and framework logits agree."""
    summary = export_model(ckpt, arch, out_dir, num_classes=classes,
                           check_count=check_count, seed=seed)
    click.echo(
        f"exported {arch} to {out_dir} "
        f"(cross-check error {summary['cross_check_error']:.2e} on {check_count} inputs)"
    )


@cli.command(name="export-data")
@click.option("--name", required=True, type=click.Choice(sorted(LOADERS)))
@click.option("--count", required=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--data-root", default=".", type=click.Path(file_okay=False),
              help="Directory holding the raw dataset files.")
def export_data_cmd(name, count, out_dir, data_root):
    """Write test samples with preprocessing baked into the tensors."""
    summary = export_dataset(name, count, out_dir, data_root)
    click.echo(f"exported {summary['samples']} {name} samples to {out_dir}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as err:
        click.echo(f"usage error: {err.format_message()}", err=True)
        return 1
    except click.ClickException as err:
        err.show()
        return 1
    except (ExportError, ValueError) as err:
        click.echo(f"error: {err}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
