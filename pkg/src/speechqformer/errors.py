"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Inconsistent or unknown configuration."""


class FormatError(ValueError):
    """A binary or text file does not match its declared layout."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite values, unreachable target)."""


class CorruptCheckpointError(FormatError):
    """Checkpoint checksum mismatch or truncated payload."""
