"""Exception hierarchy shared by the codec, the STAMP nodes and the control channel.

Node-level errors carry a stable ``code`` string.  The control server puts
that code on the wire and the client maps it back to the same class, so a
caller sees identical exceptions whether the node is local or remote.
"""


class StampError(Exception):
    """Base class for every error raised by this package."""

    code = "Internal"

    def __init__(self, message=""):
        super().__init__(message or self.code)
        self.message = message or self.code


# -- codec -----------------------------------------------------------------

class CodecError(StampError, ValueError):
    code = "DecodeError"


class TooShortError(CodecError):
    code = "TooShort"


class SsidZeroError(CodecError):
    code = "SsidZero"


class BadErrorEstimateError(CodecError):
    code = "BadErrorEstimate"


class FieldRangeError(CodecError):
    code = "FieldRange"


class EmptySegmentListError(CodecError):
    code = "EmptySegmentList"


class LengthMismatchError(CodecError):
    code = "LenMismatch"


class NotUdpError(CodecError):
    """The datagram is not IPv6 (+SRH) carrying UDP."""

    code = "NotStamp"


class ChecksumMismatchError(CodecError):
    """UDP checksum did not verify.

    The parsed datagram is still attached as ``datagram`` for diagnostics.
    """

    code = "ChecksumMismatch"

    def __init__(self, message="", datagram=None):
        super().__init__(message)
        self.datagram = datagram


# -- timebase --------------------------------------------------------------

class EraOverflowError(StampError, OverflowError):
    code = "EraOverflow"


# -- transport -------------------------------------------------------------

class TransportError(StampError):
    code = "TransportError"


class UnroutableError(TransportError):
    code = "Unroutable"


class PrivilegeRequiredError(TransportError):
    code = "PrivilegeRequired"


# -- nodes and control plane -----------------------------------------------

class NotInitializedError(StampError):
    code = "NotInitialized"


class AlreadyInitializedError(StampError):
    code = "AlreadyInitialized"


class SessionsExistError(StampError):
    code = "SessionsExist"


class DuplicateSsidError(StampError):
    code = "DuplicateSsid"


class UnknownSsidError(StampError):
    code = "UnknownSsid"


class InvalidConfigError(StampError, ValueError):
    code = "InvalidConfig"

    def __init__(self, message="", field=None):
        if field and message:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class IllegalTransitionError(StampError):
    code = "IllegalTransition"


class NotRunningError(IllegalTransitionError):
    code = "NotRunning"


class UnsupportedError(StampError):
    code = "Unsupported"


class BadRequestError(StampError):
    code = "BadRequest"


class EmptySeriesError(StampError, ValueError):
    code = "EmptySeries"


class NonMonotoneError(StampError):
    """Drop ratio decreased while the offered rate increased."""

    code = "NonMonotone"

    def __init__(self, message="", trace=None):
        super().__init__(message)
        self.trace = trace or []


class IoError(StampError, OSError):
    code = "IoError"


class SutUnreachableError(StampError):
    code = "SutUnreachable"


def _all_subclasses(cls):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


ERRORS_BY_CODE = {cls.code: cls for cls in _all_subclasses(StampError)}
ERRORS_BY_CODE["Internal"] = StampError


def error_from_code(code, message=""):
    """Rebuild the exception a remote node reported."""
    cls = ERRORS_BY_CODE.get(code, StampError)
    err = cls(message)
    if cls is StampError:
        err.code = code
    return err
