"""Client side of SLCS issuance.

:class:`SlcsFactory` holds the per-portal configuration and can serve many
users; each :meth:`SlcsFactory.new_slcs` call spawns a private
:class:`SlcsRequestor` that logs in with the delegated assertion, generates a
key pair, builds the CSR and gets it signed. Key, passphrase and certificate
stay in memory until the signed certificate has been checked; only then does
the factory write anything to disk.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import secrets
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import httpx
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization

from . import _x509
from .clock import SystemClock
from .errors import (
    DnMismatch,
    ExpiredAssertion,
    IssuanceFailed,
    InvalidToken,
    ServiceError,
    StorageFailed,
    WeakKey,
)
from .model import (
    DEFAULT_KEY_SIZE,
    MAX_SLCS_LIFETIME,
    Assertion,
    CertificateConstraints,
    Credential,
    SlcsLoginResponse,
    SubjectDn,
)
from .store import CredentialStore
from .web import raise_for_error

log = logging.getLogger(__name__)

PASSPHRASE_ALPHABET = string.ascii_letters + string.digits


def random_passphrase(length: int = 32) -> str:
    return "".join(secrets.choice(PASSPHRASE_ALPHABET) for _ in range(length))


def random_basename() -> str:
    return secrets.token_hex(8)


def load_properties(path: os.PathLike | str) -> dict[str, str]:
    """Read a flat ``key = value`` file (``#`` comments, no sections)."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"))
    parser.optionxform = str
    parser.read_string("[properties]\n" + Path(path).read_text())
    return dict(parser["properties"])


def build_csr(key, dn: SubjectDn, constraints: CertificateConstraints | None = None) -> bytes:
    """PEM CSR for ``dn`` self-signed with ``key``."""
    minimum = (constraints or CertificateConstraints()).key_size_min
    bits = _x509.key_bits(key.public_key())
    if bits < minimum:
        raise WeakKey(f"{bits}-bit key below the {minimum}-bit minimum")
    csr = x509.CertificateSigningRequestBuilder().subject_name(_x509.name_from_dn(dn)).sign(key, hashes.SHA256())
    return csr.public_bytes(serialization.Encoding.PEM)


@dataclass(frozen=True)
class SlcsFactoryConfig:
    slcs_login_url: str
    slcs_sign_url: str
    store_directory: Path
    ca_trust_anchor: x509.Certificate
    default_lifetime: int = MAX_SLCS_LIFETIME
    key_size: int = DEFAULT_KEY_SIZE

    def __post_init__(self):
        path = Path(self.store_directory)
        object.__setattr__(self, "store_directory", path)
        if not path.is_dir() or not os.access(path, os.W_OK):
            raise StorageFailed(f"store directory {path} is missing or not writable")

    @classmethod
    def from_properties(cls, props: Mapping[str, str] | os.PathLike | str) -> "SlcsFactoryConfig":
        if not isinstance(props, Mapping):
            props = load_properties(props)
        anchor = props["ca-trust-anchor"]
        return cls(
            slcs_login_url=props["slcs-login-url"],
            slcs_sign_url=props["slcs-sign-url"],
            store_directory=Path(props["store-directory"]),
            ca_trust_anchor=x509.load_pem_x509_certificate(Path(anchor).read_bytes()),
            default_lifetime=int(props.get("default-lifetime", MAX_SLCS_LIFETIME)),
            key_size=int(props.get("key-size", DEFAULT_KEY_SIZE)),
        )


class SlcsRequestor:
    """One certificate request; everything it holds lives only in memory."""

    def __init__(self, config: SlcsFactoryConfig, http: httpx.Client):
        self.config = config
        self.http = http
        self.login_response: SlcsLoginResponse | None = None
        self.key = None
        self.certificate: x509.Certificate | None = None

    def login(self, assertion: Assertion) -> SlcsLoginResponse:
        response = self.http.post(self.config.slcs_login_url, content=assertion.to_json())
        raise_for_error(response)
        self.login_response = SlcsLoginResponse.from_dict(response.json())
        return self.login_response

    def generate_key(self) -> None:
        size = max(self.config.key_size, self.login_response.constraints.key_size_min)
        self.key = _x509.generate_rsa_key(size)

    def submit(self, lifetime: int) -> x509.Certificate:
        csr = build_csr(self.key, self.login_response.dn, self.login_response.constraints)
        body = {"csr": csr.decode(), "token": self.login_response.auth_token, "lifetime": lifetime}
        response = self.http.post(self.config.slcs_sign_url, content=json.dumps(body))
        raise_for_error(response)
        cert = _x509.load_cert(response.content)
        self._check(cert)
        self.certificate = cert
        return cert

    def _check(self, cert: x509.Certificate) -> None:
        if not _x509.signed_by(cert, self.config.ca_trust_anchor):
            raise IssuanceFailed("returned certificate is not signed by the configured CA")
        if _x509.dn_from_name(cert.subject) != self.login_response.dn:
            raise IssuanceFailed("returned certificate subject differs from the login DN")
        if not _x509.same_public_key(cert.public_key(), self.key.public_key()):
            raise IssuanceFailed("returned certificate is for a different key")

    def run(self, assertion: Assertion, lifetime: int) -> x509.Certificate:
        self.login(assertion)
        self.generate_key()
        return self.submit(lifetime)


class SlcsFactory:
    """Long-lived, per-portal entry point for SLCS certificates."""

    def __init__(
        self,
        config: SlcsFactoryConfig,
        clock=None,
        store: CredentialStore | None = None,
        http: httpx.Client | None = None,
    ):
        self.config = config
        self.clock = clock or SystemClock()
        self.store = store or CredentialStore(config.store_directory)
        self.http = http or httpx.Client(timeout=30.0)

    def new_slcs(
        self,
        assertion: Assertion,
        certificate_path: os.PathLike | str | None = None,
        key_path: os.PathLike | str | None = None,
        passphrase: str | None = None,
        lifetime: int | None = None,
        store_passphrase: bool = False,
    ) -> Credential:
        """Obtain a certificate for the assertion's subject and store it.

        Raises ExpiredAssertion before any network traffic when the assertion
        is already stale, so callers can send the browser off for renewal.
        """
        now = self.clock.now()
        if assertion.expired(now):
            raise ExpiredAssertion(f"assertion for {assertion.subject} expired at {assertion.expires_at}")

        requestor = SlcsRequestor(self.config, self.http)
        try:
            cert = requestor.run(assertion, lifetime or self.config.default_lifetime)
        except (DnMismatch, InvalidToken, ServiceError, httpx.HTTPError) as exc:
            raise IssuanceFailed(f"{type(exc).__name__}: {exc}") from exc

        base = random_basename()
        cert_path = Path(certificate_path) if certificate_path else self.config.store_directory / f"{base}.pem"
        key_file = Path(key_path) if key_path else self.config.store_directory / f"{base}.key"
        secret = passphrase if passphrase is not None else random_passphrase()
        not_before, not_after = _x509.not_before(cert), _x509.not_after(cert)
        self.store.write_credential(
            cert_path,
            key_file,
            _x509.cert_pem(cert),
            _x509.encrypted_key_pem(requestor.key, secret),
            not_after=not_after,
            written_at=not_before,
            passphrase=secret if store_passphrase else None,
        )
        log.info("stored SLCS certificate for %s at %s", _x509.dn_from_name(cert.subject), cert_path)
        return Credential(cert_path, key_file, secret, _x509.dn_from_name(cert.subject), not_before, not_after)


def new_slcs(factory: SlcsFactory, assertion: Assertion, **overrides) -> Credential:
    return factory.new_slcs(assertion, **overrides)
