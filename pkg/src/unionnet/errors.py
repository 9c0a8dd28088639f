"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


class FormatError(ValueError):
    """A file or byte stream does not match its expected layout."""


class StaleCacheError(RuntimeError):
    """A backward pass received a cache that does not match the latest forward."""


class TrainingError(RuntimeError):
    """Training aborted; the message carries epoch/batch coordinates."""
