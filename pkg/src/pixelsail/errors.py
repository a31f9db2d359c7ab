"""Exception hierarchy. The CLI maps these to exit codes (config 2,
checkpoint 3, data 4)."""


class PixelSailError(Exception):
    pass


class ShapeError(PixelSailError):
    """Tensor shapes incompatible with an operation's contract."""


class ConfigError(PixelSailError):
    """Invalid configuration value or combination."""


class DataError(PixelSailError):
    """Malformed record, mask, or prompt."""


class CheckpointError(PixelSailError):
    """Unreadable or mismatched checkpoint file."""
