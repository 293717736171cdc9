"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`GridCertError`; the class name doubles as the wire-level error code
used by the simulated HTTP services.
"""


class GridCertError(Exception):
    """Base class for all package errors."""

    code = "GridCertError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        cls.code = cls.__name__


class MalformedDn(GridCertError, ValueError):
    pass


class MalformedFqan(GridCertError, ValueError):
    pass


class InvalidAssertion(GridCertError):
    """Assertion signature does not verify, or issuer is not trusted."""


class ExpiredAssertion(GridCertError):
    """Assertion is past its validity window; callers should renew it."""


class UnknownUser(GridCertError):
    pass


class SessionExpired(GridCertError):
    """The IdP session is gone; only an interactive login can recover."""


class NoSuchSession(GridCertError):
    pass


class UrlTooLong(GridCertError, ValueError):
    pass


class MalformedReturnUrl(GridCertError, ValueError):
    pass


class InvalidToken(GridCertError):
    pass


class DnMismatch(GridCertError):
    pass


class WeakKey(GridCertError):
    pass


class IssuanceFailed(GridCertError):
    pass


class StorageFailed(GridCertError):
    pass


class CredentialExpired(GridCertError):
    pass


class UnknownVo(GridCertError):
    pass


class AttributeDenied(GridCertError):
    pass


class HandshakeRejected(GridCertError):
    pass


class PrefixViolation(HandshakeRejected):
    pass


class ServiceError(GridCertError):
    """A remote simulator answered with an unexpected status."""


_BY_CODE = None


def error_for_code(code, message=""):
    """Rebuild an exception from its wire code; unknown codes map to ServiceError."""
    global _BY_CODE
    if _BY_CODE is None:
        _BY_CODE = {}
        stack = [GridCertError]
        while stack:
            cls = stack.pop()
            _BY_CODE[cls.code] = cls
            stack.extend(cls.__subclasses__())
    cls = _BY_CODE.get(code, ServiceError)
    return cls(message or code)
