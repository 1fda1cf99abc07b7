"""Exception types shared across the package."""


class PlatefitError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(PlatefitError):
    """Invalid geometry configuration or mesh inconsistent with it."""


class MeshFileError(PlatefitError):
    """Malformed mesh file.  Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SolverError(PlatefitError):
    """Linear solve failed or produced an unacceptable residual.

    ``condition`` holds an estimate of the system condition number when one
    is available, ``frequency_hz`` the driving frequency of the offending
    solve (if the failure happened inside a sweep or loss evaluation).
    """

    def __init__(self, message, condition=None, frequency_hz=None):
        self.condition = condition
        self.frequency_hz = frequency_hz
        if frequency_hz is not None:
            message = f"{message} (at {frequency_hz} Hz)"
        if condition is not None:
            message = f"{message} [condition estimate {condition:.3e}]"
        super().__init__(message)


class EigenSolverError(PlatefitError):
    """Modal eigenvalue solve did not converge or failed its residual check."""


class InfeasibleParametersError(PlatefitError):
    """Material parameters violate positivity / positive-definiteness."""
