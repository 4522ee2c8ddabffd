"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2 (usage),
DataError -> 3, NumericError -> 4, CheckpointError/OSError -> 5.
"""


class MedmambaError(Exception):
    pass


class ConfigError(MedmambaError):
    """Invalid configuration, flags, or argument combinations."""


class DataError(MedmambaError):
    """Malformed manifests, recordings, or incompatible dataset shapes."""


class NumericError(MedmambaError):
    """Numerical contract violations: non-finite values, undefined metrics,
    failed decompositions, tolerance breaches."""


class CheckpointError(OSError):
    """Unreadable or inconsistent checkpoint files."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""
