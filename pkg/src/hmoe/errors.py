"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A value became NaN/Inf, or a numeric precondition failed."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class StatError(ValueError):
    """Routing statistics requested over an empty batch."""


class CheckpointError(IOError):
    """Checkpoint file is malformed or does not match the target model."""
