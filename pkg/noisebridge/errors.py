"""Exception types raised by noisebridge.

Each error also derives from the builtin it refines, so callers that only
know about ``ValueError`` or ``RuntimeError`` keep working.
"""


class NoiseBridgeError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(NoiseBridgeError, ValueError):
    """A configuration value or combination of values is invalid.

    Args:
        message: Human readable summary
        field_errors: ``(dotted.field.path, message)`` pairs, if known
    """

    def __init__(self, message: str, field_errors=None):
        super().__init__(message)
        self.field_errors = list(field_errors or [])

    def __str__(self) -> str:
        if not self.field_errors:
            return super().__str__()
        lines = [super().__str__()]
        lines.extend(f"  {path}: {msg}" for path, msg in self.field_errors)
        return "\n".join(lines)


class DomainError(NoiseBridgeError, ValueError):
    """A numeric argument lies outside the domain of a formula."""


class ShapeMismatchError(NoiseBridgeError, ValueError):
    """Array operands have incompatible shapes."""


class TimestepError(NoiseBridgeError, ValueError):
    """A timestep index or ordering of timesteps is invalid."""


class DegenerateImageError(NoiseBridgeError, ValueError):
    """An image carries too little information for the requested analysis."""


class DatasetError(NoiseBridgeError, ValueError):
    """A dataset does not meet the preconditions of a stage."""


class UntrainedModelError(NoiseBridgeError, ValueError):
    """A model that has never been trained was handed to inference."""


class DivergenceError(NoiseBridgeError, RuntimeError):
    """Training produced a non-finite loss."""


class ConvergenceError(NoiseBridgeError, RuntimeError):
    """Training finished without reaching its quality target."""


class CheckpointNotFoundError(NoiseBridgeError, FileNotFoundError):
    """A stage needs an artifact an earlier stage has not produced."""


__all__ = [
    "NoiseBridgeError",
    "ConfigurationError",
    "DomainError",
    "ShapeMismatchError",
    "TimestepError",
    "DegenerateImageError",
    "DatasetError",
    "UntrainedModelError",
    "DivergenceError",
    "ConvergenceError",
    "CheckpointNotFoundError",
]
