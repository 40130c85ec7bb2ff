class ConfigError(ValueError):
    """Invalid configuration or precondition on hyperparameters."""


class ShapeError(ValueError):
    """Tensor shapes or level sets do not line up."""


class CacheFormatError(IOError):
    """Feature cache file is malformed, truncated or of another version."""
