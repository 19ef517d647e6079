"""Checkpoint and dataset exporter for the neuromerge toolkit."""

from .archs import ARCHITECTURES, build
from .datasets import DatasetUnavailableError, export_dataset
from .export import (
    ExportError,
    UnsupportedLayerError,
    cross_check,
    export_model,
    export_torch_model,
)

__version__ = "0.1.0"
