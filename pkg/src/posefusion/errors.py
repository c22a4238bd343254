"""Exception types shared across the package.

Plain ``ValueError`` is used for bad arguments and violated call
preconditions; the classes below mark conditions callers are expected to
branch on (CLI exit codes, ingest diagnostics, checkpoint safety).
"""


class DataError(Exception):
    """A data file exists but its contents are invalid (bad pose matrix, ...)."""


class IngestError(Exception):
    """A dataset cannot be assembled (missing files, count mismatches)."""


class FlowFormatError(ValueError):
    """Malformed optical-flow binary payload."""


class ConfigError(Exception):
    """Invalid experiment configuration (unknown keys, bad values)."""


class DependencyError(Exception):
    """A required upstream artifact (e.g. checkpoint) is missing."""


class CheckpointMismatchError(Exception):
    """Checkpoint config fingerprint does not match the expected config."""


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; message carries last-batch diagnostics."""


class SimulationSpecError(ValueError):
    """Invalid trajectory simulation spec."""
