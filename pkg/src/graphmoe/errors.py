"""Exception types shared across the package."""


class GraphMoeError(Exception):
    """Base class for all package errors."""


class DimensionError(GraphMoeError, ValueError):
    """Operand shapes do not compose."""


class ConfigError(GraphMoeError, ValueError):
    """A configuration value is unknown or violates an invariant."""


class ContractError(GraphMoeError, RuntimeError):
    """An API precondition was violated (stale tape, missing output, ...)."""


class DegenerateInputError(GraphMoeError, ValueError):
    """Input is empty or otherwise carries no information."""


class InputError(GraphMoeError, ValueError):
    """Token ids or sequence lengths outside the model's range."""


class MeasurementError(GraphMoeError, RuntimeError):
    """A timing measurement is below the clock's usable resolution."""


class ComparisonError(GraphMoeError, ValueError):
    """Two runs cannot be compared because their configs differ."""


class CheckpointError(GraphMoeError, IOError):
    """Checkpoint manifest or payload is malformed or corrupt."""


class NonFiniteLossError(GraphMoeError, FloatingPointError):
    """Training produced a NaN or infinite loss."""
