"""Exception types shared across the pipeline."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration (shape/divisibility violations)."""


class InputError(ValueError):
    """Malformed runtime input: bad label index, shape mismatch, empty mask."""


class DatasetError(RuntimeError):
    """Dataset root is unusable; message names the offending file."""


class ProviderError(RuntimeError):
    """Mask provider unavailable or failed for one image."""

    def __init__(self, message: str, image_id: str | None = None):
        super().__init__(message)
        self.image_id = image_id


class ChecksumError(RuntimeError):
    """Persisted gallery entry failed its integrity check."""
