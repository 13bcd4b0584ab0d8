"""Exception types shared across the package."""


class FilmRestoreError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FilmRestoreError, ValueError):
    pass


class InputError(FilmRestoreError, ValueError):
    pass


class CorruptDatasetError(FilmRestoreError):
    pass


class AlignmentError(FilmRestoreError, ValueError):
    """Patch coordinates do not map exactly onto the latent grid."""


class AssemblyError(FilmRestoreError, ValueError):
    pass


class NumericalError(FilmRestoreError, ArithmeticError):
    pass


class StaleCacheError(FilmRestoreError, RuntimeError):
    """KV-cache read at a timestep other than the one it was filled at."""


class UndefinedMetricError(FilmRestoreError, ValueError):
    pass
