"""Exception hierarchy.

Every error carries the exit code the CLI reports for it:
0 success, 1 property failure, 2 usage/config, 3 I/O.
"""

from __future__ import annotations


class CgegnnError(Exception):
    exit_code = 2


class DimensionError(CgegnnError, ValueError):
    """Unsupported algebra dimension or mismatched operands."""


class GradeError(CgegnnError, ValueError):
    pass


class ShapeError(CgegnnError, ValueError):
    pass


class NotInvertibleError(CgegnnError, ValueError):
    pass


class OrthogonalityError(CgegnnError, ValueError):
    pass


class ConfigError(CgegnnError, ValueError):
    pass


class DegenerateHullError(CgegnnError, ValueError):
    """All points coplanar or collinear."""


class NonFiniteError(CgegnnError, FloatingPointError):
    pass


class DatasetIOError(CgegnnError, OSError):
    exit_code = 3


class CheckpointError(CgegnnError, OSError):
    exit_code = 3


class PropertyViolation(CgegnnError, AssertionError):
    exit_code = 1


class TapeError(CgegnnError, RuntimeError):
    """Operands recorded on different tapes, or a non-scalar loss."""
