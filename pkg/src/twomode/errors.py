"""Exception types shared across the package."""


class TwoModeError(Exception):
    """Base class for all package errors."""


class DomainError(TwoModeError, ValueError):
    """An argument lies outside the domain of the operation."""


class UnphysicalStateError(TwoModeError):
    """A physical (Heisenberg-valid) state was required but not supplied."""


class FitError(TwoModeError):
    """A model fit failed to converge or the parameters are not identifiable."""


class SchemaError(TwoModeError, ValueError):
    """A serialized document does not match a known schema version."""
