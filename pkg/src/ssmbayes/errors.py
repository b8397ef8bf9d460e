"""Exception types raised by the library."""


class SsmError(Exception):
    """Base class for all library errors."""


class ModelSpecError(SsmError, ValueError):
    """A model description violates a dimension or validity constraint."""


class ConfigError(SsmError, ValueError):
    """A run configuration (CLI) is malformed or inconsistent."""


class NumericalError(SsmError, RuntimeError):
    """A numerical operation failed (singular matrix, divergence, ...)."""


class ParticleDegeneracyError(NumericalError):
    """All particle weights collapsed to zero at some time step."""
