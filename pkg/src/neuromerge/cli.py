"""Command-line interface: inspect, compress, evaluate, compare, self-verify.

Exit codes: 0 success, 1 usage error, 2 validation/config error, 3 runtime
numeric error. With ``--json`` every report goes to stdout as canonical
JSON (sorted keys), byte-identical across runs on identical inputs.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .criteria import Criterion
from .errors import (
    ConfigError,
    DegenerateInputError,
    ModelFormatError,
    NeuroMergeError,
    ShapeError,
    ValidationError,
)
from .evaluate import accuracy, dump_feature_maps, evaluate, final_response_layer, forward, ware
from .io import load_dataset, load_model, save_model
from .merge import MergeConfig, apply, eligible_layers
from .model import (
    BatchNorm,
    Conv2d,
    Flatten,
    FullyConnected,
    Network,
    ResidualBlock,
    infer_shapes,
    parameter_count,
)
from .verify import run_all

REPORT_FILENAME = "merge_report.json"


def _emit(obj, as_json):
    if as_json:
        click.echo(json.dumps(obj, indent=2, sort_keys=True))
        return True
    return False


def _threads_option(value):
    if value is None:
        value = int(os.environ.get("NEUROMERGE_THREADS", "1"))
    if value < 1:
        raise click.UsageError("--threads must be >= 1")
    # The pipeline is sequential and order-fixed; the cap exists so callers
    # can pin worker counts without changing results.
    return value


@click.group(name="neuromerge")
def cli():
    """Compress networks by merging pruned neurons into the next layer."""


def _layer_rows(net: Network):
    shapes = infer_shapes(net)
    rows = []
    for layer in net.walk():
        kind = type(layer).__name__
        out_shape = list(shapes[layer.name][1])
        if isinstance(layer, FullyConnected):
            params = layer.weight.size + (0 if layer.bias is None else layer.bias.size)
        elif isinstance(layer, Conv2d):
            params = layer.weight.size
        elif isinstance(layer, BatchNorm):
            params = layer.gamma.size + layer.beta.size
        else:
            params = 0
        rows.append({"name": layer.name, "kind": kind, "output_shape": out_shape, "parameters": int(params)})
    return rows


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--json", "as_json", is_flag=True, default=False)
def inspect(model_path, as_json):
    """Summarize a model: layers, shapes, parameter counts."""
    net = load_model(model_path)
    summary = {
        "input_shape": list(net.input_shape),
        "classifier": net.classifier_name(),
        "parameter_count": parameter_count(net),
        "layers": _layer_rows(net),
    }
    if _emit(summary, as_json):
        return
    click.echo(f"input shape: {tuple(net.input_shape)}")
    click.echo(f"classifier:  {summary['classifier']}")
    click.echo(f"parameters:  {summary['parameter_count']}")
    for row in summary["layers"]:
        click.echo(
            f"  {row['name']:<16} {row['kind']:<16} out={tuple(row['output_shape'])!s:<16}"
            f" params={row['parameters']}"
        )


def _load_plan(net: Network, plan_file, ratio):
    if plan_file is not None:
        try:
            plan = json.loads(Path(plan_file).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"plan file {plan_file} is not valid JSON: {err}") from err
        if not isinstance(plan, dict):
            raise ConfigError("plan file must map layer names to pruning ratios")
        return {str(k): float(v) for k, v in plan.items()}
    layers = eligible_layers(net)
    if not layers:
        raise ConfigError("network has no prunable layers")
    return {name: ratio for name in layers}


def _run_compress(model_path, out_path, criterion, ratio, plan_file, t, lam, mode, as_json):
    net = load_model(model_path)
    plan = _load_plan(net, plan_file, ratio)
    cfg = MergeConfig(criterion=Criterion.from_name(criterion), plan=plan, t=t, lam=lam, mode=mode)
    compressed, report = apply(net, cfg)
    save_model(compressed, out_path)
    report_dict = report.to_dict()
    text = json.dumps(report_dict, indent=2, sort_keys=True) + "\n"
    (Path(out_path) / REPORT_FILENAME).write_text(text, encoding="utf-8")
    if _emit(report_dict, as_json):
        return
    click.echo(f"{mode}: {model_path} -> {out_path}")
    click.echo(
        f"parameters: {report.parameters_before} -> {report.parameters_after}"
        f" ({100.0 * (1 - report.parameters_after / report.parameters_before):.1f}% reduction)"
    )
    for entry in report.layers:
        click.echo(
            f"  {entry.name:<16} kept {entry.retained}/{entry.original}"
            f" compensated {entry.compensated}"
            + (f" warnings {len(entry.warnings)}" if entry.warnings else "")
        )


def _compress_options(f):
    opts = [
        click.option("--model", "model_path", required=True, type=click.Path(exists=True, file_okay=False)),
        click.option("--out", "out_path", required=True, type=click.Path(file_okay=False)),
        click.option("--criterion", default="l1", type=click.Choice([c.value for c in Criterion])),
        click.option("--ratio", default=0.5, type=float, help="Uniform pruning ratio for eligible layers."),
        click.option("--plan", "plan_file", default=None, type=click.Path(exists=True, dir_okay=False),
                     help="JSON file mapping layer names to ratios; overrides --ratio."),
        click.option("-t", "--threshold", "t", default=0.1, type=float,
                     help="Minimum cosine similarity for compensation; >1 disables it."),
        click.option("--lambda", "lam", default=0.85, type=float,
                     help="Donor selection weight between cosine and bias distance."),
        click.option("--threads", default=None, type=int),
        click.option("--json", "as_json", is_flag=True, default=False),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


@cli.command()
@_compress_options
@click.option("--mode", default="merge", type=click.Choice(["merge", "prune"]))
def merge(model_path, out_path, criterion, ratio, plan_file, t, lam, threads, as_json, mode):
    """Compress a model, folding removed neurons into the next layer."""
    _threads_option(threads)
    _run_compress(model_path, out_path, criterion, ratio, plan_file, t, lam, mode, as_json)


@cli.command()
@_compress_options
def prune(model_path, out_path, criterion, ratio, plan_file, t, lam, threads, as_json):
    """Structured pruning: same topology as merge, no compensation."""
    _threads_option(threads)
    _run_compress(model_path, out_path, criterion, ratio, plan_file, t, lam, "prune", as_json)


@cli.command(name="eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--tap", default=None, help="Layer whose activation to treat as the response layer.")
@click.option("--top-k", default=1, type=int, help="Count a sample correct if the label ranks in the top k.")
@click.option("--dump-logits", "logits_path", default=None, type=click.Path(dir_okay=False),
              help="Write per-sample logits as raw little-endian float32.")
@click.option("--threads", default=None, type=int)
@click.option("--json", "as_json", is_flag=True, default=False)
def eval_cmd(model_path, data_path, tap, top_k, logits_path, threads, as_json):
    """Accuracy and parameter count of a model on a dataset."""
    _threads_option(threads)
    net = load_model(model_path)
    data = load_dataset(data_path)
    report = evaluate(net, data, model_id=Path(model_path).name, top_k=top_k)
    if logits_path:
        rows = []
        for m in range(data.sample_count):
            logits, _ = forward(net, data.inputs[m])
            rows.append(logits)
        Path(logits_path).write_bytes(
            np.ascontiguousarray(np.stack(rows), dtype=np.dtype("<f4")).tobytes()
        )
    payload = report.to_dict()
    if tap:
        payload["tap"] = tap
    if _emit(payload, as_json):
        return
    click.echo(f"model:      {payload['model_id']}")
    click.echo(f"accuracy:   {payload['accuracy']:.4f}")
    click.echo(f"parameters: {payload['parameter_count']}")
    click.echo(f"samples:    {payload['sample_count']}")


def _load_report(model_dir):
    path = Path(model_dir) / REPORT_FILENAME
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def _tap_restriction(original: Network, report: dict, tap: str):
    """Retained indices of the original layer backing ``tap``, or None.

    Walks back from the tap through transparent nodes to the nearest weight
    layer; if that layer appears in the compression report, its retained
    indices (expanded across spatial positions when a flatten intervenes)
    map the compressed responses into the original index space.
    """
    if report is None:
        return None
    entries = {e["name"]: e for e in report.get("layers", [])}
    nodes = list(original.layers)
    pos = next((i for i, nd in enumerate(nodes) if getattr(nd, "name", None) == tap), None)
    if pos is None:
        return None
    shapes = infer_shapes(original)
    hw = 1
    for j in range(pos, -1, -1):
        node = nodes[j]
        if isinstance(node, Flatten):
            in_shape = shapes[node.name][0]
            hw = in_shape[1] * in_shape[2]
            continue
        if isinstance(node, (FullyConnected, Conv2d)):
            entry = entries.get(node.name)
            if entry is None:
                return None
            retained = np.asarray(entry["retained_indices"], dtype=np.int64)
            if hw == 1:
                return retained
            return (retained[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
        if isinstance(node, ResidualBlock):
            return None
    return None


@cli.command()
@click.option("--baseline", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--pruned", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--merged", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--tap", default=None)
@click.option("--threads", default=None, type=int)
@click.option("--json", "as_json", is_flag=True, default=False)
def compare(baseline, pruned, merged, data_path, tap, threads, as_json):
    """Accuracy triple and reconstruction-error pair against a baseline model."""
    _threads_option(threads)
    base_net = load_model(baseline)
    pruned_net = load_model(pruned)
    merged_net = load_model(merged)
    data = load_dataset(data_path)
    tap_name = tap or final_response_layer(base_net)
    result = {
        "tap": tap_name,
        "accuracy": {
            "baseline": accuracy(base_net, data),
            "pruned": accuracy(pruned_net, data),
            "merged": accuracy(merged_net, data),
        },
        "ware": {
            "pruned": ware(base_net, pruned_net, data, tap_name,
                           _tap_restriction(base_net, _load_report(pruned), tap_name)),
            "merged": ware(base_net, merged_net, data, tap_name,
                           _tap_restriction(base_net, _load_report(merged), tap_name)),
        },
        "parameters": {
            "baseline": parameter_count(base_net),
            "pruned": parameter_count(pruned_net),
            "merged": parameter_count(merged_net),
        },
    }
    if _emit(result, as_json):
        return
    click.echo(f"tap: {tap_name}")
    for key in ("baseline", "pruned", "merged"):
        click.echo(f"  {key:<9} acc={result['accuracy'][key]:.4f} params={result['parameters'][key]}")
    click.echo(f"  WARE pruned={result['ware']['pruned']:.4f} merged={result['ware']['merged']:.4f}")


@cli.command()
@click.option("--seed", default=0, type=int)
@click.option("--json", "as_json", is_flag=True, default=False)
def verify(seed, as_json):
    """Run the embedded identity suite on random instances."""
    results = run_all(seed)
    ok = all(r.passed for r in results)
    payload = {"seed": seed, "passed": ok, "checks": [r.to_dict() for r in results]}
    if not _emit(payload, as_json):
        for r in results:
            status = "ok" if r.passed else "FAILED"
            click.echo(f"  {r.name:<28} {status} ({r.trials} trials){' ' + r.detail if r.detail else ''}")
        click.echo("all identities hold" if ok else "identity violation detected")
    if not ok:
        raise DegenerateInputError("identity suite failed")


@cli.command(name="dump-features")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--layer", required=True)
@click.option("--index", default=0, type=int, help="Sample index within the dataset.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def dump_features(model_path, data_path, layer, index, out_path):
    """Write one sample's feature map at the named layer as a raw blob."""
    net = load_model(model_path)
    data = load_dataset(data_path)
    if not 0 <= index < data.sample_count:
        raise click.UsageError(f"--index must be in 0..{data.sample_count - 1}")
    dump_feature_maps(net, data.inputs[index], layer, out_path)
    click.echo(f"wrote {out_path} (+ shape sidecar)")


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
    except click.exceptions.Abort:
        return 1
    except DegenerateInputError as err:
        click.echo(f"numeric error: {err}", err=True)
        return 3
    except (ValidationError, ConfigError, ModelFormatError, ShapeError) as err:
        click.echo(f"error: {err}", err=True)
        return 2
    except (ValueError, NeuroMergeError) as err:
        click.echo(f"error: {err}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
