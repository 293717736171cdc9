"""Attribute grants and the VOMS simulator that signs them.

A grant binds an ordered FQAN list to a holder DN for a validity window and
is signed with the VO server's Ed25519 key. Clients prove possession of the
holder certificate's key when asking for one.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import httpx
from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from werkzeug.routing import Map, Rule
from werkzeug.wrappers import Request, Response

from . import _x509
from .clock import SystemClock
from .errors import AttributeDenied, GridCertError, UnknownVo
from .model import DEFAULT_CLOCK_SKEW, Fqan, SubjectDn, b64d, b64e, canonical_json
from .web import WsgiService, error_response, json_response, raise_for_error

DEFAULT_GRANT_LIFETIME = 43_200


@dataclass(frozen=True)
class AttributeGrant:
    vo: str
    fqans: tuple[Fqan, ...]
    holder: SubjectDn
    issuer: str
    not_before: int
    not_after: int
    signature: bytes = b""

    def payload(self) -> bytes:
        return canonical_json(
            {
                "vo": self.vo,
                "fqans": [str(f) for f in self.fqans],
                "holder": str(self.holder),
                "issuer": self.issuer,
                "not_before": self.not_before,
                "not_after": self.not_after,
            }
        )

    def signed(self, key: Ed25519PrivateKey) -> "AttributeGrant":
        return replace(self, signature=key.sign(self.payload()))

    def verify(self, public_key: Ed25519PublicKey) -> bool:
        try:
            public_key.verify(self.signature, self.payload())
        except InvalidSignature:
            return False
        return True

    def valid_at(self, now: int) -> bool:
        return self.not_before <= now <= self.not_after

    def to_dict(self) -> dict:
        data = json.loads(self.payload())
        data["signature"] = b64e(self.signature)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeGrant":
        return cls(
            vo=str(data["vo"]),
            fqans=tuple(Fqan.parse(f) for f in data["fqans"]),
            holder=SubjectDn.parse(data["holder"]),
            issuer=str(data["issuer"]),
            not_before=int(data["not_before"]),
            not_after=int(data["not_after"]),
            signature=b64d(data["signature"]),
        )


def public_key_pem(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo)


def load_public_key(pem: bytes) -> Ed25519PublicKey:
    return serialization.load_pem_public_key(pem)


def _request_payload(vo: str, fqans: Sequence[Fqan], timestamp: int) -> bytes:
    return canonical_json({"vo": vo, "fqans": [str(f) for f in fqans], "timestamp": timestamp})


class VomsServer(WsgiService):
    """Serves ``POST /voms/<vo>/grant`` for every VO in its membership table.

    ``membership`` maps VO name to ``{canonical DN: FQANs the member holds}``;
    membership of a VO implies its root group.
    """

    def __init__(
        self,
        membership: Mapping[str, Mapping[str, Iterable[Fqan | str]]],
        trust_anchors: Iterable[x509.Certificate],
        clock=None,
        grant_lifetime: int = DEFAULT_GRANT_LIFETIME,
        skew: int = DEFAULT_CLOCK_SKEW,
        key: Ed25519PrivateKey | None = None,
        issuer: str = "voms.simfed.example",
    ):
        self.clock = clock or SystemClock()
        self.trust_anchors = list(trust_anchors)
        self.grant_lifetime = grant_lifetime
        self.skew = skew
        self.issuer = issuer
        self._key = key or Ed25519PrivateKey.generate()
        self._lock = threading.Lock()
        self._members: dict[str, dict[str, set[Fqan]]] = {}
        for vo, members in membership.items():
            for dn, fqans in members.items():
                self.add_member(vo, dn, fqans)
        self.url_map = Map([Rule("/voms/<vo>/grant", endpoint="grant", methods=["POST"])])

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()

    def add_member(self, vo: str, dn: SubjectDn | str, fqans: Iterable[Fqan | str] = ()) -> None:
        held = {Fqan(vo)} | {f if isinstance(f, Fqan) else Fqan.parse(f) for f in fqans}
        with self._lock:
            self._members.setdefault(vo, {}).setdefault(str(dn), set()).update(held)

    def grant(self, vo: str, holder: SubjectDn, requested: Sequence[Fqan], now: int | None = None) -> AttributeGrant:
        now = self.clock.now() if now is None else now
        with self._lock:
            if vo not in self._members:
                raise UnknownVo(vo)
            held = set(self._members[vo].get(str(holder), ()))
        if not held:
            raise AttributeDenied(f"{holder} is not a member of {vo}")
        granted = tuple(f for f in requested if f in held)
        return AttributeGrant(vo, granted, holder, self.issuer, now, now + self.grant_lifetime).signed(self._key)

    def _authenticate(self, body: Mapping, vo: str, fqans: Sequence[Fqan], now: int) -> SubjectDn:
        cert = _x509.load_cert(body["holder_certificate"].encode())
        if not any(_x509.signed_by(cert, anchor) for anchor in self.trust_anchors):
            raise AttributeDenied("holder certificate is not from a trusted CA")
        if not _x509.not_before(cert) <= now <= _x509.not_after(cert):
            raise AttributeDenied("holder certificate is not valid now")
        timestamp = int(body["timestamp"])
        if abs(now - timestamp) > self.skew:
            raise AttributeDenied("stale request")
        proof = b64d(body["proof"])
        if not _x509.rsa_verify(cert.public_key(), proof, _request_payload(vo, fqans, timestamp)):
            raise AttributeDenied("proof of possession does not verify")
        return _x509.dn_from_name(cert.subject)

    def on_grant(self, request: Request, vo: str) -> Response:
        now = self.clock.now()
        try:
            body = json.loads(request.get_data())
            fqans = [Fqan.parse(f) for f in body["fqans"]]
        except (ValueError, KeyError, TypeError) as exc:
            return json_response({"error": "BadRequest", "detail": str(exc)}, 400)
        try:
            holder = self._authenticate(body, vo, fqans, now)
            grant = self.grant(vo, holder, fqans, now)
        except UnknownVo as exc:
            return error_response(exc, 404)
        except (AttributeDenied, ValueError, KeyError) as exc:
            if not isinstance(exc, GridCertError):
                exc = AttributeDenied(str(exc))
            return error_response(exc, 403)
        return json_response(grant.to_dict())


def voms_fetch(
    endpoint_url: str,
    vo: str,
    holder_certificate: x509.Certificate,
    holder_key,
    fqans: Sequence[Fqan],
    now: int,
    http: httpx.Client | None = None,
) -> AttributeGrant:
    """Ask the VO server at ``endpoint_url`` for a grant covering ``fqans``."""
    body = {
        "holder_certificate": _x509.cert_pem(holder_certificate).decode(),
        "fqans": [str(f) for f in fqans],
        "timestamp": now,
        "proof": b64e(_x509.rsa_sign(holder_key, _request_payload(vo, fqans, now))),
    }
    url = f"{endpoint_url.rstrip('/')}/voms/{vo}/grant"
    client = http or httpx.Client(timeout=30.0)
    try:
        response = client.post(url, content=json.dumps(body))
    except httpx.HTTPError as exc:
        raise AttributeDenied(f"VOMS endpoint {endpoint_url} unreachable: {exc}") from exc
    finally:
        if http is None:
            client.close()
    if response.status_code == 404:
        raise UnknownVo(vo)
    try:
        raise_for_error(response)
    except GridCertError as exc:
        if isinstance(exc, AttributeDenied):
            raise
        raise AttributeDenied(f"{exc.code}: {exc}") from exc
    return AttributeGrant.from_dict(response.json())
