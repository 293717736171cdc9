"""Thin helpers around ``cryptography`` shared by the CA, client and proxy code."""

from __future__ import annotations

import datetime as dt

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.x509.oid import NameOID

from .errors import MalformedDn
from .model import SubjectDn

_NAME_OIDS = {
    "C": NameOID.COUNTRY_NAME,
    "ST": NameOID.STATE_OR_PROVINCE_NAME,
    "L": NameOID.LOCALITY_NAME,
    "O": NameOID.ORGANIZATION_NAME,
    "OU": NameOID.ORGANIZATIONAL_UNIT_NAME,
    "CN": NameOID.COMMON_NAME,
    "DC": NameOID.DOMAIN_COMPONENT,
    "UID": NameOID.USER_ID,
    "emailAddress": NameOID.EMAIL_ADDRESS,
}
_OID_NAMES = {oid: name for name, oid in _NAME_OIDS.items()}

# RFC 3820 ProxyCertInfo, with the inherit-all policy language.
PROXY_CERT_INFO_OID = x509.ObjectIdentifier("1.3.6.1.5.5.7.1.14")
INHERIT_ALL_OID = x509.ObjectIdentifier("1.3.6.1.5.5.7.21.1")
# Private arc (2.25 = UUID-derived OIDs) for the embedded attribute grants.
ATTRIBUTE_GRANT_OID = x509.ObjectIdentifier("2.25.197311584712290627734207372290498118011")


def name_from_dn(dn: SubjectDn) -> x509.Name:
    attrs = []
    for key, value in dn.rdns:
        oid = _NAME_OIDS.get(key)
        if oid is None:
            raise MalformedDn(f"unsupported DN attribute {key}")
        attrs.append(x509.NameAttribute(oid, value))
    return x509.Name(attrs)


def dn_from_name(name: x509.Name) -> SubjectDn:
    rdns = []
    for rdn in name.rdns:
        for attr in rdn:
            key = _OID_NAMES.get(attr.oid, attr.oid.dotted_string)
            rdns.append((key, attr.value))
    return SubjectDn(tuple(rdns))


def utc(ts: int) -> dt.datetime:
    return dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc)


def ts(when: dt.datetime) -> int:
    return int(when.timestamp())


def not_before(cert: x509.Certificate) -> int:
    return ts(cert.not_valid_before_utc)


def not_after(cert: x509.Certificate) -> int:
    return ts(cert.not_valid_after_utc)


def generate_rsa_key(bits: int) -> rsa.RSAPrivateKey:
    return rsa.generate_private_key(public_exponent=65537, key_size=bits)


def key_bits(public_key) -> int:
    return getattr(public_key, "key_size", 0)


def cert_pem(cert: x509.Certificate) -> bytes:
    return cert.public_bytes(serialization.Encoding.PEM)


def load_cert(data: bytes) -> x509.Certificate:
    return x509.load_pem_x509_certificate(data)


def load_certs(data: bytes) -> list[x509.Certificate]:
    return x509.load_pem_x509_certificates(data)


def encrypted_key_pem(key, passphrase: str) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.BestAvailableEncryption(passphrase.encode()),
    )


def plain_key_pem(key) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.TraditionalOpenSSL,
        serialization.NoEncryption(),
    )


def same_public_key(a, b) -> bool:
    fmt = (serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo)
    return a.public_bytes(*fmt) == b.public_bytes(*fmt)


def signed_by(cert: x509.Certificate, issuer: x509.Certificate) -> bool:
    try:
        cert.verify_directly_issued_by(issuer)
    except (ValueError, TypeError, InvalidSignature):
        return False
    return True


def rsa_sign(key, data: bytes) -> bytes:
    return key.sign(data, padding.PKCS1v15(), hashes.SHA256())


def rsa_verify(public_key, signature: bytes, data: bytes) -> bool:
    try:
        public_key.verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
    except InvalidSignature:
        return False
    return True


# --------------------------------------------------------------------------
# Minimal DER, enough for the two extensions we emit.


def _der_len(n: int) -> bytes:
    if n < 0x80:
        return bytes([n])
    body = n.to_bytes((n.bit_length() + 7) // 8, "big")
    return bytes([0x80 | len(body)]) + body


def der_tlv(tag: int, body: bytes) -> bytes:
    return bytes([tag]) + _der_len(len(body)) + body


def der_read_tlv(data: bytes, expected_tag: int) -> bytes:
    if len(data) < 2 or data[0] != expected_tag:
        raise ValueError("unexpected DER tag")
    first = data[1]
    if first < 0x80:
        length, offset = first, 2
    else:
        width = first & 0x7F
        length = int.from_bytes(data[2 : 2 + width], "big")
        offset = 2 + width
    body = data[offset : offset + length]
    if len(body) != length or offset + length != len(data):
        raise ValueError("truncated or trailing DER")
    return body


def _der_oid(oid: x509.ObjectIdentifier) -> bytes:
    arcs = [int(a) for a in oid.dotted_string.split(".")]
    out = bytearray()
    for arc in [40 * arcs[0] + arcs[1], *arcs[2:]]:
        chunk = [arc & 0x7F]
        arc >>= 7
        while arc:
            chunk.append(0x80 | (arc & 0x7F))
            arc >>= 7
        out.extend(reversed(chunk))
    return der_tlv(0x06, bytes(out))


def proxy_cert_info() -> x509.UnrecognizedExtension:
    """ProxyCertInfo ::= SEQUENCE { proxyPolicy SEQUENCE { policyLanguage OID } }."""
    body = der_tlv(0x30, der_tlv(0x30, _der_oid(INHERIT_ALL_OID)))
    return x509.UnrecognizedExtension(PROXY_CERT_INFO_OID, body)


def is_proxy(cert: x509.Certificate) -> bool:
    try:
        ext = cert.extensions.get_extension_for_oid(PROXY_CERT_INFO_OID)
    except x509.ExtensionNotFound:
        return False
    return ext.critical


def utf8_extension(oid: x509.ObjectIdentifier, text: str) -> x509.UnrecognizedExtension:
    return x509.UnrecognizedExtension(oid, der_tlv(0x0C, text.encode()))


def read_utf8_extension(cert: x509.Certificate, oid: x509.ObjectIdentifier) -> str | None:
    try:
        ext = cert.extensions.get_extension_for_oid(oid)
    except x509.ExtensionNotFound:
        return None
    return der_read_tlv(ext.value.value, 0x0C).decode()
