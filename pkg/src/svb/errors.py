"""Exception hierarchy shared by every module of the package."""


class SvbError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SvbError, ValueError):
    """A vector or matrix does not match the shape it is combined with."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NonFiniteError(SvbError, ValueError):
    pass


class EmptyDataError(SvbError, ValueError):
    pass


class ConfigError(SvbError, ValueError):
    pass


class ParseError(SvbError, ValueError):
    """Malformed LIBSVM input. ``line`` is 1-based."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EncodeError(SvbError, ValueError):
    pass


class DecodeError(SvbError, ValueError):
    """Base for wire-format decode failures; ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(DecodeError):
    pass


class UnsupportedVersionError(DecodeError):
    pass


class TruncatedMessageError(DecodeError):
    pass


class IndexOrderError(DecodeError):
    """Sparse indices are not strictly increasing or exceed the nominal length."""


class MalformedMessageError(DecodeError):
    """Unknown kind or coding flag, or trailing bytes after the body."""


class DuplicateMessageError(SvbError):
    pass


class TransportError(SvbError):
    """Message movement failed. ``peer`` names the remote side when known."""

    def __init__(self, message, peer=None):
        super().__init__(message)
        self.peer = peer
        self.metrics = None


class DataIOError(SvbError, OSError):
    """A data, model or metrics file could not be read or written."""
