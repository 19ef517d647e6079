"""Read locally stored evaluation splits and bake in the preprocessing.

Sources are the raw published files (IDX for FashionMNIST, python pickles
for CIFAR); nothing is downloaded. Normalization constants are embedded in
the exported tensors so the toolkit side stays preprocessing-free.
"""

from __future__ import annotations

import pickle
import struct
from pathlib import Path

import numpy as np

from .export import ExportError, write_dataset_dir

FASHIONMNIST_MEAN = 0.5
FASHIONMNIST_STD = 0.5
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2023, 0.1994, 0.2010)


class DatasetUnavailableError(ExportError):
    """Raw dataset files are missing; the message carries fetch instructions."""


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = path.read_bytes()
    magic, = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise ExportError(f"{path}: bad IDX magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}i", raw[4 : 4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    return data.reshape(dims)


def _load_fashionmnist(root: Path):
    raw = root / "FashionMNIST" / "raw"
    images_path = raw / "t10k-images-idx3-ubyte"
    labels_path = raw / "t10k-labels-idx1-ubyte"
    if not (images_path.is_file() and labels_path.is_file()):
        raise DatasetUnavailableError(
            f"FashionMNIST test files not found under {raw}. Download "
            "t10k-images-idx3-ubyte.gz and t10k-labels-idx1-ubyte.gz from "
            "https://github.com/zalandoresearch/fashion-mnist and gunzip them there."
        )
    images = _read_idx(images_path, 0x803).astype(np.float32)
    labels = _read_idx(labels_path, 0x801).astype(np.uint32)
    inputs = (images / 255.0 - FASHIONMNIST_MEAN) / FASHIONMNIST_STD
    return inputs[:, None, :, :].astype(np.float32), labels, 10


def _load_cifar(root: Path, fine: bool):
    if fine:
        path = root / "cifar-100-python" / "test"
        url = "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz"
        label_key, classes = b"fine_labels", 100
    else:
        path = root / "cifar-10-batches-py" / "test_batch"
        url = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
        label_key, classes = b"labels", 10
    if not path.is_file():
        raise DatasetUnavailableError(
            f"CIFAR test batch not found at {path}. Download and extract {url}."
        )
    with path.open("rb") as fh:
        batch = pickle.load(fh, encoding="bytes")
    data = np.asarray(batch[b"data"], dtype=np.float32).reshape(-1, 3, 32, 32) / 255.0
    mean = np.asarray(CIFAR_MEAN, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR_STD, dtype=np.float32).reshape(1, 3, 1, 1)
    inputs = ((data - mean) / std).astype(np.float32)
    labels = np.asarray(batch[label_key], dtype=np.uint32)
    return inputs, labels, classes


LOADERS = {
    "fashionmnist": lambda root: _load_fashionmnist(root),
    "cifar10": lambda root: _load_cifar(root, fine=False),
    "cifar100": lambda root: _load_cifar(root, fine=True),
}


def export_dataset(name: str, count: int, out_dir, data_root=".") -> dict:
    """Write ``count`` test samples of the named dataset in the portable format."""
    if name not in LOADERS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(LOADERS)}")
    if count < 1:
        raise ValueError("sample count must be positive")
    inputs, labels, classes = LOADERS[name](Path(data_root))
    if count > inputs.shape[0]:
        raise ValueError(f"requested {count} samples but the split holds {inputs.shape[0]}")
    write_dataset_dir(inputs[:count], labels[:count], classes, Path(out_dir))
    return {"samples": count, "classes": classes, "input_shape": list(inputs.shape[1:])}
