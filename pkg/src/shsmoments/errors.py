"""Exception types shared across the package.

Numeric failures (NonRealizableError, DegenerateUpdateError,
ClosureViolationError, IntegrationError) map to CLI exit code 3,
configuration and schema problems to exit code 2.
"""


class ShsError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatchError(ShsError):
    """Operands live in state spaces of different dimension."""


class ClosureViolationError(ShsError):
    """The generator maps some tracked monomial outside the truncated basis."""


class NonRealizableError(ShsError):
    """Newton fit stalled: the moment vector is not realizable on the domain
    at this order (or numerically indistinguishable from such a case)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DegenerateUpdateError(ShsError):
    """Measurement update denominator underflowed: the likelihood is wildly
    inconsistent with the prior support."""


class IntegrationError(ShsError):
    """Integrand evaluated to a non-finite value at a quadrature node."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class ConfigError(ShsError):
    """Scenario configuration failed validation; message carries the field path."""


class SchemaError(ShsError):
    """An input file does not match the documented CSV/checkpoint schema."""
