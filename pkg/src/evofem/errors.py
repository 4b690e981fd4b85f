"""Exception types raised across the package."""


class EvofemError(Exception):
    """Base class for all package errors."""


class NumericError(EvofemError):
    """Base class for failures of a numerical procedure (CLI exit code 3)."""


class IntegrationError(NumericError):
    """Non-finite velocity evaluation while integrating a flow."""

    def __init__(self, t, x):
        super().__init__(f"non-finite velocity at t={t!r}, x={x!r}")
        self.t = t
        self.x = x


class DegenerateFlowError(NumericError):
    """Jacobian determinant vanished or changed sign."""


class InversionError(NumericError):
    """Reverse-time integration failed to reproduce the target point."""


class InvalidMeshError(EvofemError, ValueError):
    """Mesh construction arguments violate a precondition."""


class AssemblyError(NumericError):
    """Assembly on a tangled or degenerate geometry, or a singular solve."""


class DomainError(EvofemError, ValueError):
    """Evaluation point lies outside the evolving domain."""


class UnsupportedError(EvofemError, ValueError):
    """Requested combination of pivot and topology is not available."""


class NonconvergenceError(NumericError):
    """Newton iteration did not reach the tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class DivergedStateError(NumericError):
    """Operator evaluation produced non-finite values."""


class ConfigError(EvofemError, ValueError):
    """Invalid scenario configuration, with the offending line when known."""

    def __init__(self, message, line=None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
