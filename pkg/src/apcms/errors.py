"""Exception hierarchy shared across the package.

Three branches matter to the command line: validation problems (bad input,
exit code 2), numerical problems (solver failures, exit code 3) and I/O
problems (exit code 4).  Everything raised by this package derives from
:class:`ApcmsError` so callers can catch broadly.
"""

from __future__ import annotations


class ApcmsError(Exception):
    """Base class for all package errors."""


class ValidationError(ApcmsError):
    """Input violates a documented precondition or schema."""


class NumericalError(ApcmsError):
    """A numerical operation failed (singular system, bad residual, ...)."""


class MeshError(ValidationError):
    """Mesh data violates an invariant."""


class BufferQualityError(MeshError):
    """Generated buffer mesh missed its quality target."""


class PortCompatibilityError(ValidationError):
    """Two connected ports cannot be reconciled."""


class ConfigError(ValidationError):
    """System configuration file is malformed or inconsistent."""


class SolverError(NumericalError):
    """Linear solve failed."""


class NotSPDError(SolverError):
    """Matrix handed to an SPD solve is not symmetric positive definite."""


class SingularMatrixError(SolverError):
    """Matrix is singular to working precision."""


class TrainingError(ApcmsError):
    """Offline training could not complete."""
