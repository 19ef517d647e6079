"""Exception hierarchy shared by all neuromerge modules."""


class NeuroMergeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NeuroMergeError):
    """Tensor or layer shapes are incompatible for the requested operation."""


class DegenerateInputError(NeuroMergeError):
    """Numerically degenerate input (zero norms, no compensable donor, empty metric)."""


class ValidationError(NeuroMergeError):
    """A network failed structural validation; message lists the diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


class ModelFormatError(NeuroMergeError):
    """A stored model or dataset could not be read back (missing/garbled blob, bad manifest)."""


class ConfigError(NeuroMergeError):
    """A merge/prune configuration does not fit the target network."""
