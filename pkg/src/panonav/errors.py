"""Exception hierarchy; the CLI maps these onto categorized exit codes."""


class PanoNavError(Exception):
    """Base class for all package errors."""


class ConfigError(PanoNavError):
    """Invalid configuration values, unknown keys, infeasible scenarios."""


class NumericError(PanoNavError):
    """Non-finite values detected mid-computation."""


class CheckpointError(PanoNavError):
    """Base class for checkpoint file problems (I/O category)."""


class CheckpointMagicError(CheckpointError):
    """File is not a checkpoint (bad magic string)."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


class CheckpointArchError(CheckpointError):
    """Checkpoint architecture config does not match the requested one."""


class CheckpointChecksumError(CheckpointError):
    """Stored checksum does not match file contents."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload does."""
