"""
Exception hierarchy for ChunkFlow Engine.

Library code raises these; the CLI boundary in app.py logs them and maps
them to exit codes.
"""


class ChunkFlowError(Exception):
    """Base class for all ChunkFlow errors."""


class DimensionError(ChunkFlowError, ValueError):
    """Array shapes do not agree."""


class ConfigError(ChunkFlowError, ValueError):
    """Invalid configuration value."""


class ContractError(ChunkFlowError):
    """A precondition of an operation was violated."""


class DecodeError(ChunkFlowError, ValueError):
    """Token ids cannot be decoded."""


class NonFiniteError(ChunkFlowError, FloatingPointError):
    """NaN or Inf reached a gradient, loss or parameter."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class DivergenceError(ChunkFlowError):
    """Training loss stayed far above its initial value."""


class UnderdeterminedError(ChunkFlowError, ValueError):
    """Not enough distinct observations to fit a model."""


class ShardError(ChunkFlowError):
    """Problem writing or reading tar shards."""


class MissingArtifactError(ChunkFlowError, FileNotFoundError):
    """One or more upstream artifacts are missing."""

    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("Missing artifacts: " + ", ".join(self.missing))
