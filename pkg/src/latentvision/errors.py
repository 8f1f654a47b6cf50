"""Exception hierarchy shared across the package."""


class LatentVisionError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentVisionError, ValueError):
    """Inconsistent quality / channel / hyperparameter configuration."""


class ShapeError(LatentVisionError, ValueError):
    """Tensor shape violates an operation precondition."""


class EncodeError(LatentVisionError, ValueError):
    """A symbol cannot be represented under its probability table."""


class DecodeError(LatentVisionError, ValueError):
    """Corrupt, truncated or inconsistent coded data."""


class BitstreamError(DecodeError):
    """Malformed container header."""


class DatasetError(LatentVisionError):
    """Problems with dataset layout, manifests or latent stores."""


class TrainingDiverged(LatentVisionError, RuntimeError):
    """Loss became non-finite during training."""
