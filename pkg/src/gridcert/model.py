"""Core value types shared by every other module. No I/O happens here."""

from __future__ import annotations

import base64
import json
import re
import types
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import MalformedDn, MalformedFqan

MAX_SLCS_LIFETIME = 1_000_000
DEFAULT_ASSERTION_VALIDITY = 300
DEFAULT_SESSION_VALIDITY = 28_800
DEFAULT_CLOCK_SKEW = 60
DEFAULT_KEY_SIZE = 2048

_ATTR_NAME = re.compile(r"^[A-Za-z][A-Za-z0-9.-]*$")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def b64e(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    return base64.urlsafe_b64decode(text.encode("ascii"))


# --------------------------------------------------------------------------
# Distinguished names


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace("/", "\\/")


@dataclass(frozen=True)
class SubjectDn:
    """Ordered RDN list, rendered as ``/C=CH/O=Example/CN=Alice``.

    Values may contain any character; ``/`` and ``\\`` are backslash-escaped in
    the canonical string so that parsing is the exact inverse of rendering.
    """

    rdns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        rdns = tuple((str(k), str(v)) for k, v in self.rdns)
        if not rdns:
            raise MalformedDn("empty DN")
        for name, value in rdns:
            if not _ATTR_NAME.match(name):
                raise MalformedDn(f"bad attribute name {name!r}")
            if not value:
                raise MalformedDn(f"empty value for {name}")
        object.__setattr__(self, "rdns", rdns)

    @classmethod
    def parse(cls, text: str) -> "SubjectDn":
        if not text or text[0] != "/":
            raise MalformedDn(f"DN must start with '/': {text!r}")
        parts, buf, i = [], [], 1
        while i < len(text):
            ch = text[i]
            if ch == "\\":
                if i + 1 >= len(text) or text[i + 1] not in "\\/":
                    raise MalformedDn(f"bad escape in {text!r}")
                buf.append(text[i + 1])
                i += 2
                continue
            if ch == "/":
                parts.append("".join(buf))
                buf = []
            else:
                buf.append(ch)
            i += 1
        parts.append("".join(buf))
        rdns = []
        for part in parts:
            name, sep, value = part.partition("=")
            if not sep:
                raise MalformedDn(f"component without '=': {part!r}")
            rdns.append((name, value))
        return cls(tuple(rdns))

    def __str__(self) -> str:
        return "".join(f"/{k}={_escape(v)}" for k, v in self.rdns)

    def with_cn(self, value: str) -> "SubjectDn":
        return SubjectDn(self.rdns + (("CN", value),))

    @property
    def common_name(self) -> str | None:
        for name, value in reversed(self.rdns):
            if name == "CN":
                return value
        return None


def canonicalize_dn(dn: SubjectDn | Sequence[tuple[str, str]]) -> str:
    if not isinstance(dn, SubjectDn):
        dn = SubjectDn(tuple(dn))
    return str(dn)


def parse_dn(text: str) -> SubjectDn:
    return SubjectDn.parse(text)


# --------------------------------------------------------------------------
# FQANs

_FQAN_PART = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class Fqan:
    """``/vo[/group...][/Role=r][/Capability=c]``."""

    vo: str
    groups: tuple[str, ...] = ()
    role: str | None = None
    capability: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        for part in (self.vo, *self.groups):
            if not _FQAN_PART.match(part or ""):
                raise MalformedFqan(f"bad FQAN component {part!r}")
        for part in (self.role, self.capability):
            if part is not None and not _FQAN_PART.match(part):
                raise MalformedFqan(f"bad FQAN qualifier {part!r}")

    @classmethod
    def parse(cls, text: str) -> "Fqan":
        if not text.startswith("/"):
            raise MalformedFqan(f"FQAN must start with '/': {text!r}")
        parts = text[1:].split("/")
        vo, rest = parts[0], parts[1:]
        groups, role, capability = [], None, None
        for part in rest:
            if part.startswith("Role="):
                if role is not None or capability is not None:
                    raise MalformedFqan(f"misplaced Role in {text!r}")
                role = part[5:]
            elif part.startswith("Capability="):
                if capability is not None:
                    raise MalformedFqan(f"duplicate Capability in {text!r}")
                capability = part[11:]
            else:
                if role is not None or capability is not None:
                    raise MalformedFqan(f"group after qualifier in {text!r}")
                groups.append(part)
        return cls(vo, tuple(groups), role, capability)

    def __str__(self) -> str:
        out = "/" + "/".join((self.vo, *self.groups))
        if self.role is not None:
            out += f"/Role={self.role}"
        if self.capability is not None:
            out += f"/Capability={self.capability}"
        return out


# --------------------------------------------------------------------------
# Assertions


@dataclass(frozen=True)
class Assertion:
    """Signed single-sign-on token standing in for a SAML2 assertion.

    The signature is Ed25519 over the canonical JSON of every other field.
    """

    subject: str
    issuer: str
    issued_at: int
    validity: int = DEFAULT_ASSERTION_VALIDITY
    attributes: Mapping[str, str] = field(default_factory=dict)
    signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "attributes", types.MappingProxyType(dict(self.attributes)))

    def payload(self) -> bytes:
        return canonical_json(
            {
                "subject": self.subject,
                "issuer": self.issuer,
                "issued_at": self.issued_at,
                "validity": self.validity,
                "attributes": dict(self.attributes),
            }
        )

    def signed(self, key: Ed25519PrivateKey) -> "Assertion":
        return replace(self, signature=key.sign(self.payload()))

    def verify(self, public_key: Ed25519PublicKey) -> bool:
        try:
            public_key.verify(self.signature, self.payload())
        except InvalidSignature:
            return False
        return True

    @property
    def expires_at(self) -> int:
        return self.issued_at + self.validity

    def expired(self, now: int) -> bool:
        return now > self.issued_at + self.validity

    def to_dict(self) -> dict:
        return {
            "subject": self.subject,
            "issuer": self.issuer,
            "issued_at": self.issued_at,
            "validity": self.validity,
            "attributes": dict(self.attributes),
            "signature": b64e(self.signature),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "Assertion":
        return cls(
            subject=str(data["subject"]),
            issuer=str(data["issuer"]),
            issued_at=int(data["issued_at"]),
            validity=int(data["validity"]),
            attributes={str(k): str(v) for k, v in dict(data.get("attributes", {})).items()},
            signature=b64d(data["signature"]),
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> "Assertion":
        return cls.from_dict(json.loads(text))


def assertion_expired(assertion: Assertion, now: int) -> bool:
    return assertion.expired(now)


# --------------------------------------------------------------------------
# SLCS login


@dataclass(frozen=True)
class CertificateConstraints:
    max_lifetime: int = MAX_SLCS_LIFETIME
    key_size_min: int = DEFAULT_KEY_SIZE
    allowed_key_usages: frozenset[str] = frozenset({"digital_signature", "key_encipherment"})

    def __post_init__(self):
        if not 0 < self.max_lifetime <= MAX_SLCS_LIFETIME:
            raise ValueError(f"max_lifetime must be in (0, {MAX_SLCS_LIFETIME}]")
        object.__setattr__(self, "allowed_key_usages", frozenset(self.allowed_key_usages))

    def to_dict(self) -> dict:
        return {
            "max_lifetime": self.max_lifetime,
            "key_size_min": self.key_size_min,
            "allowed_key_usages": sorted(self.allowed_key_usages),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CertificateConstraints":
        return cls(
            int(data["max_lifetime"]),
            int(data["key_size_min"]),
            frozenset(data["allowed_key_usages"]),
        )


@dataclass(frozen=True)
class SlcsLoginResponse:
    dn: SubjectDn
    auth_token: str = field(repr=False)
    constraints: CertificateConstraints

    def to_dict(self) -> dict:
        return {"dn": str(self.dn), "token": self.auth_token, "constraints": self.constraints.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "SlcsLoginResponse":
        return cls(
            SubjectDn.parse(data["dn"]),
            str(data["token"]),
            CertificateConstraints.from_dict(data["constraints"]),
        )


# --------------------------------------------------------------------------
# Credentials


@dataclass(frozen=True)
class Credential:
    """The newSLCS result: where the certificate and encrypted key live."""

    certificate_path: Path
    private_key_path: Path
    passphrase: str = field(repr=False)
    subject: SubjectDn
    not_before: int
    not_after: int

    @property
    def lifetime(self) -> int:
        return self.not_after - self.not_before

    def load_certificate(self):
        from cryptography import x509

        return x509.load_pem_x509_certificate(Path(self.certificate_path).read_bytes())

    def load_private_key(self):
        from cryptography.hazmat.primitives import serialization

        return serialization.load_pem_private_key(
            Path(self.private_key_path).read_bytes(), self.passphrase.encode()
        )


@dataclass(frozen=True)
class ProxyCredential:
    """A proxy chain, proxy first and end-entity last."""

    chain: tuple
    proxy_key_path: Path
    fqans: tuple[Fqan, ...]
    not_after: int

    @property
    def path(self) -> Path:
        return self.proxy_key_path

    @property
    def certificate(self):
        return self.chain[0]

    @property
    def subject(self) -> SubjectDn:
        from ._x509 import dn_from_name

        return dn_from_name(self.chain[0].subject)
