"""Exception types shared across the package."""


class ChillcastError(Exception):
    """Base class for library-specific errors."""


class SchemaError(ChillcastError):
    """Input data does not match the expected column schema."""


class EmptyDataError(ChillcastError):
    """No usable rows survived ingestion."""


class InsufficientDataError(ChillcastError):
    """A segment is too short for the requested operation."""


class ConfigError(ChillcastError):
    """Invalid or inconsistent run configuration."""


class CheckpointError(ChillcastError):
    """A checkpoint file is missing, corrupt, or incompatible."""
