class PixdiffError(Exception):
    """Base class for every error raised by pixdiff."""


class ConfigError(PixdiffError, ValueError):
    """A precondition or configuration value was rejected."""


class ShapeError(ConfigError):
    """Two arrays that must share a shape do not."""


class DivergenceError(PixdiffError, ArithmeticError):
    """Training produced a non-finite loss or parameter update."""


class ArtifactError(PixdiffError, OSError):
    """A file on disk is missing, truncated or written by an incompatible version."""


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def require_same_shape(a_shape: tuple, b_shape: tuple, what: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeError(f"{what}: shape {tuple(a_shape)} does not match {tuple(b_shape)}")
