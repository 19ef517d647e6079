"""Convert PyTorch models into the portable model directory format.

The writer emits the documented layout: ``manifest.json`` plus one raw
little-endian float32 blob per tensor. After writing, a forward-agreement
check runs the exported model through the ``neuromerge`` CLI on random
inputs and compares logits against the framework; the export only survives
if they agree within 1e-4 relative.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archs import Residual, build

FORMAT_VERSION = "neuromerge-v1"
CROSS_CHECK_TOLERANCE = 1e-4


class ExportError(Exception):
    """Conversion or verification failed; the output directory is removed."""


class UnsupportedLayerError(ExportError):
    """The model contains a module the portable format cannot express."""


def _np(tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().astype(np.float32)


class _Converter:
    def __init__(self):
        self.counters = {}
        self.blobs = {}

    def fresh(self, prefix: str) -> str:
        self.counters[prefix] = self.counters.get(prefix, 0) + 1
        return f"{prefix}{self.counters[prefix]}"

    def blob(self, name: str, arr: np.ndarray) -> str:
        filename = f"{name}.bin"
        self.blobs[filename] = np.ascontiguousarray(arr, dtype="<f4")
        return filename

    def convert_chain(self, modules) -> list:
        entries = []
        pending_conv_bias = None  # (layer entry already emitted?, bias to fold)
        for module in modules:
            if isinstance(module, nn.Dropout):
                continue  # inference no-op
            if pending_conv_bias is not None and not isinstance(
                module, (nn.BatchNorm2d, nn.BatchNorm1d)
            ):
                raise UnsupportedLayerError(
                    f"convolution {pending_conv_bias[0]} has a bias but is not followed by "
                    "a normalization layer to fold it into"
                )
            if isinstance(module, nn.Linear):
                name = self.fresh("fc")
                weight = _np(module.weight).T  # stored (in, out)
                entry = {
                    "kind": "fully_connected",
                    "name": name,
                    "weight_shape": list(weight.shape),
                    "weight": self.blob(f"{name}.weight", weight),
                }
                if module.bias is not None:
                    entry["bias"] = self.blob(f"{name}.bias", _np(module.bias))
                entries.append(entry)
            elif isinstance(module, nn.Conv2d):
                kh, kw = module.kernel_size
                if kh != kw:
                    raise UnsupportedLayerError(f"non-square kernel {module.kernel_size}")
                if module.stride[0] != module.stride[1] or module.padding[0] != module.padding[1]:
                    raise UnsupportedLayerError("anisotropic stride/padding is unsupported")
                if module.groups != 1 or module.dilation != (1, 1):
                    raise UnsupportedLayerError("grouped or dilated convolutions are unsupported")
                name = self.fresh("conv")
                weight = _np(module.weight)
                entries.append(
                    {
                        "kind": "conv2d",
                        "name": name,
                        "weight_shape": list(weight.shape),
                        "stride": int(module.stride[0]),
                        "padding": int(module.padding[0]),
                        "weight": self.blob(f"{name}.weight", weight),
                    }
                )
                if module.bias is not None:
                    pending_conv_bias = (name, _np(module.bias))
                continue
            elif isinstance(module, (nn.BatchNorm2d, nn.BatchNorm1d)):
                name = self.fresh("bn")
                c = module.num_features
                gamma = _np(module.weight) if module.affine else np.ones(c, dtype=np.float32)
                beta = _np(module.bias) if module.affine else np.zeros(c, dtype=np.float32)
                mu = _np(module.running_mean)
                if pending_conv_bias is not None:
                    mu = mu - pending_conv_bias[1]  # fold conv bias into the mean
                    pending_conv_bias = None
                sigma = np.sqrt(_np(module.running_var) + module.eps).astype(np.float32)
                entries.append(
                    {
                        "kind": "batch_norm",
                        "name": name,
                        "channels": int(c),
                        "gamma": self.blob(f"{name}.gamma", gamma),
                        "beta": self.blob(f"{name}.beta", beta),
                        "mu": self.blob(f"{name}.mu", mu),
                        "sigma": self.blob(f"{name}.sigma", sigma),
                    }
                )
            elif isinstance(module, nn.ReLU):
                entries.append({"kind": "relu", "name": self.fresh("relu")})
            elif isinstance(module, nn.MaxPool2d):
                entries.append(
                    {
                        "kind": "max_pool2d",
                        "name": self.fresh("pool"),
                        "kernel": int(module.kernel_size),
                        "stride": int(module.stride),
                    }
                )
            elif isinstance(module, nn.AvgPool2d):
                entries.append(
                    {
                        "kind": "avg_pool2d",
                        "name": self.fresh("pool"),
                        "kernel": int(module.kernel_size),
                        "stride": int(module.stride if module.stride else module.kernel_size),
                    }
                )
            elif isinstance(module, nn.Flatten):
                entries.append({"kind": "flatten", "name": self.fresh("flatten")})
            elif isinstance(module, Residual):
                entries.append(
                    {
                        "kind": "residual_block",
                        "name": self.fresh("block"),
                        "body": self.convert_chain(module.body),
                        "shortcut": self.convert_chain(module.shortcut),
                    }
                )
            else:
                raise UnsupportedLayerError(f"unsupported module kind {type(module).__name__}")
        if pending_conv_bias is not None:
            raise UnsupportedLayerError(
                f"convolution {pending_conv_bias[0]} has a bias but is not followed by "
                "a normalization layer to fold it into"
            )
        return entries


def convert_torch_model(model: nn.Sequential, input_shape) -> tuple[dict, dict]:
    """Manifest dict plus blob payloads for a sequential PyTorch model."""
    conv = _Converter()
    layers = conv.convert_chain(model)
    layers.append({"kind": "output", "name": "output"})
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": [int(s) for s in input_shape],
        "layers": layers,
    }
    return manifest, conv.blobs


def write_model_dir(manifest: dict, blobs: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out_dir / "manifest.json").write_text(text, encoding="utf-8")
    for filename, arr in blobs.items():
        (out_dir / filename).write_bytes(arr.tobytes())


def write_dataset_dir(inputs: np.ndarray, labels: np.ndarray, class_count: int, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "class_count": int(class_count),
        "input_shape": list(inputs.shape[1:]),
        "inputs": "inputs.bin",
        "labels": "labels.bin",
        "sample_count": int(inputs.shape[0]),
    }
    (out_dir / "data.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "inputs.bin").write_bytes(np.ascontiguousarray(inputs, dtype="<f4").tobytes())
    (out_dir / "labels.bin").write_bytes(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def _toolkit_logits(model_dir: Path, data_dir: Path, logits_path: Path) -> np.ndarray:
    cmd = [
        "neuromerge", "eval",
        "--model", str(model_dir),
        "--data", str(data_dir),
        "--dump-logits", str(logits_path),
        "--json",
    ]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ExportError(
            f"toolkit evaluation failed (exit {proc.returncode}): {proc.stderr.strip()}"
        )
    return np.frombuffer(logits_path.read_bytes(), dtype="<f4")


def cross_check(model: nn.Sequential, input_shape, model_dir: Path,
                count: int = 10, seed: int = 0, tol: float = CROSS_CHECK_TOLERANCE) -> float:
    """Compare framework and toolkit logits on random inputs; returns the worst error."""
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((count,) + tuple(input_shape)).astype(np.float32)
    model.eval()
    with torch.no_grad():
        ref = model(torch.from_numpy(inputs)).numpy().astype(np.float64)
    labels = ref.argmax(axis=1).astype(np.uint32)
    with tempfile.TemporaryDirectory() as tmp:
        data_dir = Path(tmp) / "data"
        write_dataset_dir(inputs, labels, ref.shape[1], data_dir)
        got = _toolkit_logits(model_dir, data_dir, Path(tmp) / "logits.bin")
    got = got.reshape(ref.shape).astype(np.float64)
    worst = 0.0
    for m in range(count):
        denom = max(np.abs(ref[m]).max(), 1e-12)
        worst = max(worst, float(np.abs(got[m] - ref[m]).max() / denom))
    if worst > tol:
        raise ExportError(
            f"forward passes disagree: relative error {worst:.3e} exceeds {tol:.1e}"
        )
    return worst


def load_checkpoint(model: nn.Sequential, ckpt_path) -> None:
    payload = torch.load(ckpt_path, map_location="cpu", weights_only=True)
    if isinstance(payload, dict) and "state_dict" in payload:
        payload = payload["state_dict"]
    model.load_state_dict(payload)


def export_model(ckpt_path, arch: str, out_dir, num_classes: int = 10,
                 check_count: int = 10, seed: int = 0) -> dict:
    """Convert a checkpoint; the output directory only survives a passing cross-check."""
    model, input_shape = build(arch, num_classes=num_classes)
    load_checkpoint(model, ckpt_path)
    return export_torch_model(model, input_shape, out_dir, check_count=check_count, seed=seed)


def export_torch_model(model: nn.Sequential, input_shape, out_dir,
                       check_count: int = 10, seed: int = 0) -> dict:
    out = Path(out_dir)
    manifest, blobs = convert_torch_model(model, input_shape)
    write_model_dir(manifest, blobs, out)
    try:
        worst = cross_check(model, input_shape, out, count=check_count, seed=seed)
    except ExportError:
        shutil.rmtree(out, ignore_errors=True)
        raise
    return {"layers": len(manifest["layers"]), "cross_check_error": worst}
