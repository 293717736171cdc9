"""RFC 3820 proxy certificates, optionally carrying VO attribute grants.

Only a user certificate and key are needed here: nothing in this module
touches single sign-on or the SLCS service.
"""

from __future__ import annotations

import json
import logging
import os
import secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import httpx
from cryptography import x509
from cryptography.hazmat.primitives import hashes

from . import _x509
from .clock import SystemClock
from .errors import CredentialExpired, UnknownVo
from .model import Credential, Fqan, ProxyCredential
from .store import CredentialStore
from .voms import AttributeGrant, voms_fetch

log = logging.getLogger(__name__)

DEFAULT_PROXY_LIFETIME = 43_200
PROXY_KEY_SIZE = 2048


@dataclass(frozen=True)
class VomsEndpoint:
    url: str
    trust_anchor: object  # Ed25519 public key of the VO server


@dataclass(frozen=True)
class ProxyFactoryConfig:
    proxy_store_directory: Path
    voms_endpoints: Mapping[str, VomsEndpoint] = field(default_factory=dict)
    default_proxy_lifetime: int = DEFAULT_PROXY_LIFETIME

    def __post_init__(self):
        object.__setattr__(self, "proxy_store_directory", Path(self.proxy_store_directory))
        object.__setattr__(self, "voms_endpoints", dict(self.voms_endpoints))

    @property
    def attribute_anchors(self) -> dict:
        return {vo: ep.trust_anchor for vo, ep in self.voms_endpoints.items()}


def group_by_vo(vos: Sequence[str | Fqan]) -> dict[str, list[Fqan]]:
    """``["life", "/atlas/Role=prod"]`` -> ``{"life": [/life], "atlas": [/atlas/Role=prod]}``."""
    grouped: dict[str, list[Fqan]] = {}
    for item in vos:
        if isinstance(item, Fqan):
            fqan = item
        elif item.startswith("/"):
            fqan = Fqan.parse(item)
        else:
            fqan = Fqan(item)
        grouped.setdefault(fqan.vo, []).append(fqan)
    return grouped


def encode_grants(grants: Sequence[AttributeGrant]) -> str:
    return json.dumps([g.to_dict() for g in grants], sort_keys=True, separators=(",", ":"))


def embedded_grants(cert: x509.Certificate) -> list[AttributeGrant]:
    text = _x509.read_utf8_extension(cert, _x509.ATTRIBUTE_GRANT_OID)
    if text is None:
        return []
    return [AttributeGrant.from_dict(d) for d in json.loads(text)]


def build_proxy_certificate(
    issuer_cert: x509.Certificate,
    issuer_key,
    proxy_public_key,
    not_before: int,
    not_after: int,
    grants: Sequence[AttributeGrant] = (),
    serial: int | None = None,
) -> x509.Certificate:
    """Sign a proxy whose subject is the issuer subject plus ``CN=<serial>``."""
    serial = serial or secrets.randbits(63) | 1
    subject = x509.Name(list(issuer_cert.subject) + [x509.NameAttribute(x509.NameOID.COMMON_NAME, str(serial))])
    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer_cert.subject)
        .public_key(proxy_public_key)
        .serial_number(serial)
        .not_valid_before(_x509.utc(not_before))
        .not_valid_after(_x509.utc(not_after))
        .add_extension(_x509.proxy_cert_info(), critical=True)
        .add_extension(
            x509.KeyUsage(True, False, True, False, False, False, False, False, False), critical=True
        )
    )
    if grants:
        builder = builder.add_extension(
            _x509.utf8_extension(_x509.ATTRIBUTE_GRANT_OID, encode_grants(grants)), critical=False
        )
    return builder.sign(issuer_key, hashes.SHA256())


@dataclass
class ProxyVerification:
    ok: bool
    reasons: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def verify_proxy(
    proxy: ProxyCredential | Sequence[x509.Certificate],
    trust_anchor: x509.Certificate,
    now: int,
    attribute_anchors: Mapping[str, object] | None = None,
) -> ProxyVerification:
    """Check signatures, the CN-appending rule, validity windows and any grants.

    Returns a falsy :class:`ProxyVerification` carrying the reasons on failure.
    """
    chain = list(proxy.chain if isinstance(proxy, ProxyCredential) else proxy)
    reasons: list[str] = []
    if len(chain) < 2:
        return ProxyVerification(False, ["chain must hold a proxy and its end-entity certificate"])

    end_entity = chain[-1]
    if _x509.is_proxy(end_entity):
        reasons.append("last certificate in chain is itself a proxy")
    if not _x509.signed_by(end_entity, trust_anchor):
        reasons.append("end-entity certificate is not signed by the trust anchor")
    for cert in (trust_anchor, *chain):
        if not _x509.not_before(cert) <= now <= _x509.not_after(cert):
            reasons.append(f"{cert.subject.rfc4514_string()} not valid at {now}")

    for level, (cert, issuer) in enumerate(zip(chain, chain[1:])):
        where = f"proxy level {level}"
        if not _x509.is_proxy(cert):
            reasons.append(f"{where}: missing critical ProxyCertInfo")
        if not _x509.signed_by(cert, issuer):
            reasons.append(f"{where}: signature does not verify against its issuer")
        subject, parent = list(cert.subject), list(issuer.subject)
        if len(subject) != len(parent) + 1 or subject[:-1] != parent or subject[-1].oid != x509.NameOID.COMMON_NAME:
            reasons.append(f"{where}: subject is not issuer subject plus one CN")
        if _x509.not_after(cert) > _x509.not_after(issuer):
            reasons.append(f"{where}: outlives its issuer")

    holder = _x509.dn_from_name(end_entity.subject)
    try:
        grants = embedded_grants(chain[0])
    except (ValueError, KeyError, TypeError) as exc:
        grants = []
        reasons.append(f"unreadable attribute extension: {exc}")
    for grant in grants:
        anchor = (attribute_anchors or {}).get(grant.vo)
        if anchor is None:
            reasons.append(f"no trust anchor for VO {grant.vo}")
        elif not grant.verify(anchor):
            reasons.append(f"grant for {grant.vo} has a bad signature")
        if grant.holder != holder:
            reasons.append(f"grant for {grant.vo} is held by {grant.holder}, not {holder}")
        if not grant.valid_at(now):
            reasons.append(f"grant for {grant.vo} not valid at {now}")
    return ProxyVerification(not reasons, reasons)


def load_proxy(path: os.PathLike | str) -> ProxyCredential:
    """Read a proxy bundle (proxy cert, proxy key, end-entity cert)."""
    data = Path(path).read_bytes()
    chain = tuple(_x509.load_certs(data))
    fqans = tuple(f for g in embedded_grants(chain[0]) for f in g.fqans)
    return ProxyCredential(chain, Path(path), fqans, _x509.not_after(chain[0]))


class GridProxyFactory:
    """Per-instance proxy factory; any number may coexist with different VO routing."""

    def __init__(
        self,
        config: ProxyFactoryConfig,
        clock=None,
        store: CredentialStore | None = None,
        http: httpx.Client | None = None,
    ):
        self.config = config
        self.clock = clock or SystemClock()
        self.store = store or CredentialStore(config.proxy_store_directory)
        self.http = http or httpx.Client(timeout=30.0)

    def new_proxy(
        self,
        credential: Credential,
        vos: Sequence[str | Fqan] = (),
        lifetime: int | None = None,
        proxy_path: os.PathLike | str | None = None,
    ) -> ProxyCredential:
        now = self.clock.now()
        if now >= credential.not_after or now < credential.not_before:
            raise CredentialExpired(f"credential for {credential.subject} is not valid at {now}")
        grouped = group_by_vo(vos)
        for vo in grouped:
            if vo not in self.config.voms_endpoints:
                raise UnknownVo(vo)

        ee_cert = credential.load_certificate()
        ee_key = credential.load_private_key()
        grants = [
            voms_fetch(self.config.voms_endpoints[vo].url, vo, ee_cert, ee_key, fqans, now, self.http)
            for vo, fqans in grouped.items()
        ]

        proxy_key = _x509.generate_rsa_key(PROXY_KEY_SIZE)
        not_after = min(now + (lifetime or self.config.default_proxy_lifetime), _x509.not_after(ee_cert))
        proxy_cert = build_proxy_certificate(ee_cert, ee_key, proxy_key.public_key(), now, not_after, grants)

        path = Path(proxy_path) if proxy_path else self.config.proxy_store_directory / f"x509up_{secrets.token_hex(8)}"
        bundle = _x509.cert_pem(proxy_cert) + _x509.plain_key_pem(proxy_key) + _x509.cert_pem(ee_cert)
        self.store.write_proxy(path, bundle, not_after=not_after, written_at=now)
        log.info("stored proxy for %s at %s", credential.subject, path)
        return ProxyCredential(
            (proxy_cert, ee_cert), path, tuple(f for g in grants for f in g.fqans), not_after
        )

    def verify_proxy(self, proxy: ProxyCredential, trust_anchor: x509.Certificate, now: int | None = None):
        now = self.clock.now() if now is None else now
        return verify_proxy(proxy, trust_anchor, now, self.config.attribute_anchors)


def new_proxy(factory: GridProxyFactory, credential: Credential, vos=(), lifetime=None) -> ProxyCredential:
    return factory.new_proxy(credential, vos, lifetime)
