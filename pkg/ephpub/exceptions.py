"""Error hierarchy shared by the library, the CLI and the HTTP API."""

from typing import Any, List, Optional


class EphPubError(Exception):
    """Base class for every error raised by ephpub"""


class InputError(EphPubError, ValueError):
    """Caller supplied an argument outside the operation's contract"""


class DomainError(EphPubError, ArithmeticError):
    """Finite-field operation with no defined result (inverse of zero)"""


class ConfigurationError(EphPubError):
    """Settings or CLI flags are inconsistent"""


class ParseError(EphPubError):
    """Bytes could not be interpreted; `position` is the offending offset when known"""

    def __init__(self, message: str, position: Optional[int] = None):
        self.position = position
        if position is not None:
            message = f"{message} (at offset {position})"
        super().__init__(message)


class AuthFailure(EphPubError):
    """Authenticated decryption rejected the ciphertext: wrong or expired key"""


class DecodeFailure(EphPubError):
    """Key could not be reconstructed from the cells"""

    def __init__(self, message: str, readings: Optional[List[Any]] = None):
        self.readings = readings
        super().__init__(message)


class Expired(EphPubError):
    """The EPO is past its expiration time"""

    def __init__(self, expiry: int, now: float):
        self.expiry = expiry
        self.now = now
        super().__init__(f"EPO expired at {expiry} (now {int(now)})")


class WriteFailure(EphPubError):
    """A bit-1 write did not leave the record cached"""

    def __init__(self, message: str, cell: Any = None):
        self.cell = cell
        super().__init__(message)


class EncodeFailure(EphPubError):
    def __init__(self, message: str, stage: str):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


class InsufficientDomains(EphPubError):
    """The domain pool cannot supply enough fresh names for the requested TTL"""


class AmbiguousSkew(EphPubError):
    """TTL populations after a flip attack are too close to separate"""

    def __init__(self, gap: float, required: float):
        self.gap = gap
        self.required = required
        super().__init__(f"TTL clusters separated by {gap}s, need at least {required}s")
