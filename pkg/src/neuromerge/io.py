"""Portable on-disk format for models and datasets.

A model is a directory with ``manifest.json`` plus one raw blob per tensor:
little-endian float32, row-major, no header. Saving is deterministic:
identical networks produce byte-identical directories. A dataset directory
holds ``data.json``, ``inputs.bin`` (float32) and ``labels.bin`` (uint32).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, ValidationError
from .model import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    Dataset,
    Flatten,
    FullyConnected,
    MaxPool2d,
    Network,
    Output,
    ReLU,
    ResidualBlock,
    require_valid,
)

FORMAT_VERSION = "neuromerge-v1"

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


def _write_blob(path: Path, arr: np.ndarray):
    try:
        path.write_bytes(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    except OSError as err:
        raise ModelFormatError(f"cannot write blob {path}: {err}") from err


def _read_blob(directory: Path, filename: str, shape, owner: str) -> np.ndarray:
    path = directory / filename
    if not path.is_file():
        raise ModelFormatError(f"{owner}: missing blob {path}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ModelFormatError(
            f"{owner}: blob {filename} holds {len(raw)} bytes, expected {expected} for shape {list(shape)}"
        )
    return np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)


def _layer_entry(layer, blobs) -> dict:
    name = layer.name
    if isinstance(layer, FullyConnected):
        entry = {
            "kind": "fully_connected",
            "name": name,
            "weight_shape": list(layer.weight.shape),
            "weight": f"{name}.weight.bin",
        }
        blobs[entry["weight"]] = layer.weight
        if layer.bias is not None:
            entry["bias"] = f"{name}.bias.bin"
            blobs[entry["bias"]] = layer.bias
        return entry
    if isinstance(layer, Conv2d):
        entry = {
            "kind": "conv2d",
            "name": name,
            "weight_shape": list(layer.weight.shape),
            "stride": layer.stride,
            "padding": layer.padding,
            "weight": f"{name}.weight.bin",
        }
        blobs[entry["weight"]] = layer.weight
        return entry
    if isinstance(layer, BatchNorm):
        entry = {"kind": "batch_norm", "name": name, "channels": layer.channels}
        for f in ("gamma", "beta", "mu", "sigma"):
            entry[f] = f"{name}.{f}.bin"
            blobs[entry[f]] = getattr(layer, f)
        return entry
    if isinstance(layer, ReLU):
        return {"kind": "relu", "name": name}
    if isinstance(layer, MaxPool2d):
        return {"kind": "max_pool2d", "name": name, "kernel": layer.kernel, "stride": layer.stride}
    if isinstance(layer, AvgPool2d):
        return {"kind": "avg_pool2d", "name": name, "kernel": layer.kernel, "stride": layer.stride}
    if isinstance(layer, Flatten):
        return {"kind": "flatten", "name": name}
    if isinstance(layer, Output):
        return {"kind": "output", "name": name}
    if isinstance(layer, ResidualBlock):
        return {
            "kind": "residual_block",
            "name": name,
            "body": [_layer_entry(l, blobs) for l in layer.body],
            "shortcut": [_layer_entry(l, blobs) for l in layer.shortcut],
        }
    raise ModelFormatError(f"{name}: cannot serialize layer kind {type(layer).__name__}")


def save_model(net: Network, path) -> None:
    """Write ``net`` under directory ``path``; deterministic byte output."""
    require_valid(net)
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ModelFormatError(f"cannot create model directory {directory}: {err}") from err
    blobs = {}
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "layers": [_layer_entry(node, blobs) for node in net.layers],
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    try:
        (directory / "manifest.json").write_text(text, encoding="utf-8")
    except OSError as err:
        raise ModelFormatError(f"cannot write manifest in {directory}: {err}") from err
    for filename, arr in blobs.items():
        _write_blob(directory / filename, arr)


def _parse_layer(entry: dict, directory: Path):
    kind = entry.get("kind")
    name = entry.get("name", "<unnamed>")
    if kind == "fully_connected":
        shape = entry["weight_shape"]
        weight = _read_blob(directory, entry["weight"], shape, name)
        bias = None
        if "bias" in entry:
            bias = _read_blob(directory, entry["bias"], (shape[1],), name)
        return FullyConnected(name, weight, bias)
    if kind == "conv2d":
        weight = _read_blob(directory, entry["weight"], entry["weight_shape"], name)
        return Conv2d(name, weight, int(entry["stride"]), int(entry["padding"]))
    if kind == "batch_norm":
        c = int(entry["channels"])
        vecs = {f: _read_blob(directory, entry[f], (c,), name) for f in ("gamma", "beta", "mu", "sigma")}
        return BatchNorm(name, **vecs)
    if kind == "relu":
        return ReLU(name)
    if kind == "max_pool2d":
        return MaxPool2d(name, int(entry["kernel"]), int(entry["stride"]))
    if kind == "avg_pool2d":
        return AvgPool2d(name, int(entry["kernel"]), int(entry["stride"]))
    if kind == "flatten":
        return Flatten(name)
    if kind == "output":
        return Output(name)
    if kind == "residual_block":
        body = tuple(_parse_layer(e, directory) for e in entry["body"])
        shortcut = tuple(_parse_layer(e, directory) for e in entry.get("shortcut", []))
        return ResidualBlock(name, body, shortcut)
    raise ModelFormatError(f"{name}: unknown layer kind {kind!r}")


def load_model(path) -> Network:
    """Read a model directory back; tensors are bit-identical to the blobs."""
    directory = Path(path)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise ModelFormatError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ModelFormatError(f"manifest {manifest_path} is not valid JSON: {err}") from err
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version!r}")
    try:
        layers = tuple(_parse_layer(e, directory) for e in manifest["layers"])
        net = Network(layers, tuple(manifest["input_shape"]))
    except KeyError as err:
        raise ModelFormatError(f"manifest missing field {err}") from err
    require_valid(net)
    return net


def save_dataset(ds: Dataset, path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "class_count": int(ds.class_count),
        "input_shape": list(ds.inputs.shape[1:]),
        "inputs": "inputs.bin",
        "labels": "labels.bin",
        "sample_count": ds.sample_count,
    }
    (directory / "data.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (directory / "inputs.bin").write_bytes(np.ascontiguousarray(ds.inputs, dtype=_F32).tobytes())
    (directory / "labels.bin").write_bytes(np.ascontiguousarray(ds.labels, dtype=_U32).tobytes())


def load_dataset(path) -> Dataset:
    directory = Path(path)
    meta_path = directory / "data.json"
    if not meta_path.is_file():
        raise ModelFormatError(f"no data.json in {directory}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    m = int(meta["sample_count"])
    shape = tuple(int(s) for s in meta["input_shape"])
    inputs_raw = (directory / meta["inputs"]).read_bytes()
    expected = m * int(np.prod(shape)) * 4
    if len(inputs_raw) != expected:
        raise ModelFormatError(
            f"inputs blob holds {len(inputs_raw)} bytes, expected {expected}"
        )
    inputs = np.frombuffer(inputs_raw, dtype=_F32).reshape((m,) + shape)
    labels_raw = (directory / meta["labels"]).read_bytes()
    if len(labels_raw) != m * 4:
        raise ModelFormatError(f"labels blob holds {len(labels_raw)} bytes, expected {m * 4}")
    labels = np.frombuffer(labels_raw, dtype=_U32)
    class_count = int(meta["class_count"])
    if labels.size and int(labels.max()) >= class_count:
        raise ValidationError([f"label {int(labels.max())} out of range for {class_count} classes"])
    return Dataset(inputs.astype(np.float32), labels, class_count)


def save_feature_map(arr: np.ndarray, path) -> None:
    """Raw blob plus a JSON shape sidecar, same encoding as model blobs."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    sidecar = {"dtype": "float32-le", "shape": list(arr.shape)}
    Path(str(p) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_feature_map(path) -> np.ndarray:
    p = Path(path)
    sidecar = json.loads(Path(str(p) + ".json").read_text(encoding="utf-8"))
    shape = tuple(int(s) for s in sidecar["shape"])
    raw = p.read_bytes()
    if len(raw) != int(np.prod(shape)) * 4:
        raise ModelFormatError(f"feature blob {p} does not match sidecar shape {shape}")
    return np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)
