"""Exception hierarchy shared by the bus, services and tools.

Wire-facing errors carry a short ``reason`` slug used verbatim in ERR frames
and mapped onto CLI exit codes, so error identity survives the TCP hop.
"""


class RingdError(Exception):
    """Base class; ``reason`` is the wire/CLI error slug."""

    reason = "error"


class UnknownChannel(RingdError):
    reason = "unknown-channel"


class DuplicateName(RingdError):
    reason = "duplicate-name"


class ShapeMismatch(RingdError):
    reason = "shape-mismatch"


class ReadOnly(RingdError):
    reason = "read-only"


class BadName(RingdError):
    reason = "bad-name"


class BusConnectionError(RingdError):
    reason = "connection"


class BindFailure(RingdError):
    reason = "bind-failure"


class ProtocolError(RingdError):
    """Malformed frame received from the peer."""

    reason = "bad-command"


class ParseError(RingdError):
    """File-format error; carries the 1-based line number."""

    reason = "parse-error"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientData(RingdError):
    reason = "insufficient-data"


class NonPositiveCurrent(RingdError):
    reason = "non-positive-current"


class NegativeInjection(RingdError):
    reason = "negative-injection"


class BadThreshold(RingdError):
    reason = "bad-threshold"


class DegenerateTune(RingdError):
    reason = "degenerate-tune"


class RankDeficient(RingdError):
    reason = "rank-deficient"


class SingularFit(RingdError):
    reason = "singular-fit"


class ConvergenceFailure(RingdError):
    reason = "convergence-failure"


class AllDisabled(RingdError):
    reason = "all-disabled"


class BadMask(RingdError):
    reason = "bad-mask"


class BadTransition(RingdError):
    reason = "bad-transition"
