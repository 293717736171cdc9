"""Simulated SLCS online CA.

Two calls, each also reachable over HTTP:

``login``     delegated assertion -> subject DN, single-use token, constraints
``sign_csr``  CSR + token -> short-lived end-entity certificate

Tokens are bound to the DN they were issued for and are consumed with an
atomic check-and-remove, so concurrent reuse yields exactly one certificate.
"""

from __future__ import annotations

import json
import secrets
import threading
from dataclasses import dataclass
from typing import Callable, Mapping

from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from cryptography.x509.oid import ExtendedKeyUsageOID
from werkzeug.routing import Map, Rule
from werkzeug.wrappers import Request, Response

from . import _x509
from .clock import SystemClock
from .errors import (
    DnMismatch,
    ExpiredAssertion,
    GridCertError,
    InvalidAssertion,
    InvalidToken,
    WeakKey,
)
from .model import (
    DEFAULT_ASSERTION_VALIDITY,
    DEFAULT_CLOCK_SKEW,
    DEFAULT_KEY_SIZE,
    MAX_SLCS_LIFETIME,
    Assertion,
    CertificateConstraints,
    SlcsLoginResponse,
    SubjectDn,
)
from .web import WsgiService, error_response, json_response

CA_VALIDITY = 10 * 365 * 86400

_KEY_USAGE_FLAGS = (
    "digital_signature",
    "content_commitment",
    "key_encipherment",
    "data_encipherment",
    "key_agreement",
)


def default_dn_mapping(country: str = "CH", federation: str = "SimFed") -> Callable[[Assertion], SubjectDn]:
    def mapping(assertion: Assertion) -> SubjectDn:
        return SubjectDn((("C", country), ("O", federation), ("CN", assertion.subject)))

    return mapping


@dataclass(frozen=True)
class _Grant:
    dn: SubjectDn
    expires_at: int
    constraints: CertificateConstraints


def make_ca_certificate(key, dn: SubjectDn, now: int, lifetime: int = CA_VALIDITY) -> x509.Certificate:
    name = _x509.name_from_dn(dn)
    return (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(1)
        .not_valid_before(_x509.utc(now - 3600))
        .not_valid_after(_x509.utc(now + lifetime))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(False, False, False, False, False, True, True, False, False), critical=True
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, hashes.SHA256())
    )


class SlcsCA(WsgiService):
    """In-process online CA holding the ``CaState`` of the simulator."""

    def __init__(
        self,
        idp_keys: Mapping[str, Ed25519PublicKey],
        clock=None,
        country: str = "CH",
        federation: str = "SimFed",
        dn_mapping: Callable[[Assertion], SubjectDn] | None = None,
        max_lifetime: int = MAX_SLCS_LIFETIME,
        key_size_min: int = DEFAULT_KEY_SIZE,
        token_ttl: int = DEFAULT_ASSERTION_VALIDITY,
        skew: int = DEFAULT_CLOCK_SKEW,
        ca_key=None,
        ca_certificate: x509.Certificate | None = None,
    ):
        self.idp_keys = dict(idp_keys)
        self.clock = clock or SystemClock()
        self.dn_mapping = dn_mapping or default_dn_mapping(country, federation)
        self.constraints = CertificateConstraints(max_lifetime, key_size_min)
        self.token_ttl = token_ttl
        self.skew = skew
        self._key = ca_key or _x509.generate_rsa_key(2048)
        self.certificate = ca_certificate or make_ca_certificate(
            self._key, SubjectDn((("C", country), ("O", federation), ("CN", f"{federation} SLCS CA"))), self.clock.now()
        )
        self._tokens: dict[str, _Grant] = {}
        self._serial = 1
        self._lock = threading.Lock()
        self.url_map = Map(
            [
                Rule("/slcs/login", endpoint="login", methods=["POST"]),
                Rule("/slcs/certificate", endpoint="certificate", methods=["POST"]),
                Rule("/slcs/ca.pem", endpoint="ca", methods=["GET"]),
            ]
        )

    # -- core -------------------------------------------------------------

    def login(self, assertion: Assertion, now: int | None = None) -> SlcsLoginResponse:
        now = self.clock.now() if now is None else now
        key = self.idp_keys.get(assertion.issuer)
        if key is None or not assertion.verify(key):
            raise InvalidAssertion(f"cannot verify assertion from {assertion.issuer!r}")
        if assertion.issued_at > now + self.skew:
            raise InvalidAssertion("assertion issued in the future")
        if now > assertion.expires_at + self.skew:
            raise ExpiredAssertion(f"assertion for {assertion.subject} expired at {assertion.expires_at}")
        dn = self.dn_mapping(assertion)
        token = secrets.token_urlsafe(32)
        with self._lock:
            self._tokens[token] = _Grant(dn, now + self.token_ttl, self.constraints)
        return SlcsLoginResponse(dn, token, self.constraints)

    def sign_csr(self, csr_pem: bytes, auth_token: str, requested_lifetime: int, now: int | None = None) -> bytes:
        now = self.clock.now() if now is None else now
        with self._lock:
            grant = self._tokens.get(auth_token)
        if grant is None or now > grant.expires_at:
            raise InvalidToken("unknown, expired or already used token")
        if requested_lifetime < 1:
            raise ValueError("requested lifetime must be positive")

        try:
            csr = x509.load_pem_x509_csr(csr_pem)
        except ValueError as exc:
            raise DnMismatch(f"unreadable CSR: {exc}") from None
        if not csr.is_signature_valid:
            raise DnMismatch("CSR self-signature does not verify")
        if _x509.dn_from_name(csr.subject) != grant.dn:
            raise DnMismatch(f"CSR subject {_x509.dn_from_name(csr.subject)} != {grant.dn}")
        bits = _x509.key_bits(csr.public_key())
        if bits < grant.constraints.key_size_min:
            raise WeakKey(f"{bits}-bit key below the {grant.constraints.key_size_min}-bit minimum")

        with self._lock:
            if self._tokens.pop(auth_token, None) is None:
                raise InvalidToken("token already used")
            self._serial += 1
            serial = self._serial

        lifetime = min(requested_lifetime, grant.constraints.max_lifetime)
        usages = {flag: flag in grant.constraints.allowed_key_usages for flag in _KEY_USAGE_FLAGS}
        cert = (
            x509.CertificateBuilder()
            .subject_name(_x509.name_from_dn(grant.dn))
            .issuer_name(self.certificate.subject)
            .public_key(csr.public_key())
            .serial_number(serial)
            .not_valid_before(_x509.utc(now))
            .not_valid_after(_x509.utc(now + lifetime))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(
                x509.KeyUsage(**usages, key_cert_sign=False, crl_sign=False, encipher_only=False, decipher_only=False),
                critical=True,
            )
            .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.CLIENT_AUTH]), critical=False)
            .add_extension(x509.SubjectKeyIdentifier.from_public_key(csr.public_key()), critical=False)
            .add_extension(
                x509.AuthorityKeyIdentifier.from_issuer_public_key(self._key.public_key()), critical=False
            )
            .sign(self._key, hashes.SHA256())
        )
        return _x509.cert_pem(cert)

    def pending_tokens(self) -> int:
        with self._lock:
            return len(self._tokens)

    # -- HTTP -------------------------------------------------------------

    _STATUS = {
        "ExpiredAssertion": 401,
        "InvalidAssertion": 403,
        "InvalidToken": 403,
        "DnMismatch": 400,
        "WeakKey": 400,
    }

    def _fail(self, exc: GridCertError) -> Response:
        return error_response(exc, self._STATUS.get(exc.code, 400))

    def on_login(self, request: Request) -> Response:
        try:
            assertion = Assertion.from_json(request.get_data())
        except (ValueError, KeyError, TypeError) as exc:
            return error_response(InvalidAssertion(f"unparseable assertion: {exc}"), 400)
        try:
            return json_response(self.login(assertion).to_dict())
        except GridCertError as exc:
            return self._fail(exc)

    def on_certificate(self, request: Request) -> Response:
        try:
            body = json.loads(request.get_data())
            csr, token = body["csr"].encode(), str(body["token"])
            lifetime = int(body.get("lifetime", self.constraints.max_lifetime))
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            return json_response({"error": "BadRequest", "detail": str(exc)}, 400)
        try:
            pem = self.sign_csr(csr, token, lifetime)
        except GridCertError as exc:
            return self._fail(exc)
        except ValueError as exc:
            return json_response({"error": "BadRequest", "detail": str(exc)}, 400)
        return Response(pem, mimetype="application/x-pem-file")

    def on_ca(self, request: Request) -> Response:
        return Response(_x509.cert_pem(self.certificate), mimetype="application/x-pem-file")
