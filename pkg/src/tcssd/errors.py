"""Exception types shared across the package."""


class TcssdError(Exception):
    """Base class for all package errors."""


class DataError(TcssdError):
    """Bad input data: malformed files, shape mismatches, invalid values."""


class CheckpointError(DataError):
    """Corrupt or inconsistent checkpoint directory."""


class TrainingError(TcssdError):
    """Training aborted (e.g. non-finite loss)."""
