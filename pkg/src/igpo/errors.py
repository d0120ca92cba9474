"""Exception taxonomy shared across the package.

Errors map to CLI exit codes: config -> 2, data/input -> 3, numeric -> 4,
I/O (checkpoints, metrics) -> 5.
"""


class IgpoError(Exception):
    """Base class for all package errors."""


class ConfigError(IgpoError):
    """Invalid configuration or incompatible hyperparameters."""


class ShapeError(ConfigError):
    """Array shapes violate an operation's contract."""


class InputError(IgpoError):
    """Invalid data fed to an operation (bad token ids, unknown symbols...)."""


class LengthError(InputError):
    """A sequence exceeds its token budget."""


class GenerationError(InputError):
    """Dataset construction could not satisfy its constraints."""


class NumericalError(IgpoError):
    """A non-finite value appeared during numeric evaluation."""


class CheckpointError(IgpoError):
    """Checkpoint file is missing, corrupted, or incompatible."""
