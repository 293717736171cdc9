"""Short-lived grid credentials for web portals.

Certificates come from an online CA in exchange for a single sign-on
assertion; proxies (optionally carrying VO attributes) are derived from them
locally. Simulators for the IdP/SP, CA and VOMS server are included.
"""

from .clock import MockClock, SystemClock
from .errors import GridCertError
from .model import (
    MAX_SLCS_LIFETIME,
    Assertion,
    CertificateConstraints,
    Credential,
    Fqan,
    ProxyCredential,
    SlcsLoginResponse,
    SubjectDn,
    canonicalize_dn,
)
from .store import CredentialStore, consume_handshake, freshness_check, prepare_handshake

# The two factories stay independent: importing one must not drag in the other.
_LAZY = {
    "GridProxyFactory": "proxy",
    "ProxyFactoryConfig": "proxy",
    "VomsEndpoint": "proxy",
    "verify_proxy": "proxy",
    "SlcsFactory": "slcs",
    "SlcsFactoryConfig": "slcs",
}


def __getattr__(name):
    if name in _LAZY:
        import importlib

        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

__all__ = [
    "MAX_SLCS_LIFETIME",
    "Assertion",
    "CertificateConstraints",
    "Credential",
    "CredentialStore",
    "Fqan",
    "GridCertError",
    "GridProxyFactory",
    "MockClock",
    "ProxyCredential",
    "ProxyFactoryConfig",
    "SlcsFactory",
    "SlcsFactoryConfig",
    "SlcsLoginResponse",
    "SubjectDn",
    "SystemClock",
    "VomsEndpoint",
    "canonicalize_dn",
    "consume_handshake",
    "freshness_check",
    "prepare_handshake",
    "verify_proxy",
]

__version__ = "0.1.0"
