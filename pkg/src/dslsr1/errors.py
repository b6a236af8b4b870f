"""Exception hierarchy shared across the package."""


class DSLSR1Error(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DSLSR1Error, ValueError):
    """Caller passed inconsistent shapes or out-of-range parameters."""


class SingularUpdateError(DSLSR1Error):
    """A bordered-inverse update hit a (near-)zero denominator.

    Callers performing pair acceptance treat this as a rejection of the
    offending pair, not as a fatal condition.
    """


class UnsupportedDiagnosticError(DSLSR1Error):
    """A diagnostic was requested on data that cannot support it.

    The spectrum of the low-rank curvature model requires exact column
    inner products; the sketched approximation is licensed only for the
    pair-acceptance test.
    """


class NumericalError(DSLSR1Error):
    """Non-finite values appeared during objective or curvature evaluation."""


class TransportError(DSLSR1Error):
    """A worker disconnected, timed out, or failed mid-collective."""

    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class ProtocolError(DSLSR1Error):
    """Peers disagreed on shapes, categories, or replicated state."""


class ConfigError(DSLSR1Error, ValueError):
    """A run configuration file is missing, malformed, or inconsistent."""
