import datetime
import subprocess
from dataclasses import dataclass
from pathlib import Path

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.x509.oid import NameOID

from gridcert.clock import MockClock

T0 = 1_700_000_000
OPENSSL = "openssl"


@pytest.fixture
def clock():
    return MockClock(T0)


# --------------------------------------------------------------------------
# A stand-alone CA built straight on the cryptography package, so the proxy
# and VOMS tests get credentials without touching the SLCS code at all.

_KEYS: dict[tuple[int, int], rsa.RSAPrivateKey] = {}


def cached_key(slot: int = 0, bits: int = 2048) -> rsa.RSAPrivateKey:
    """RSA keys are slow to make; tests that do not care share a few."""
    if (slot, bits) not in _KEYS:
        _KEYS[(slot, bits)] = rsa.generate_private_key(public_exponent=65537, key_size=bits)
    return _KEYS[(slot, bits)]


def _utc(ts: int) -> datetime.datetime:
    return datetime.datetime.fromtimestamp(ts, tz=datetime.timezone.utc)


@dataclass
class MiniCA:
    key: rsa.RSAPrivateKey
    cert: x509.Certificate
    pem_path: Path

    def issue(self, common_name: str, key, not_before: int, not_after: int, serial: int = 1000) -> x509.Certificate:
        name = x509.Name(
            [
                x509.NameAttribute(NameOID.COUNTRY_NAME, "CH"),
                x509.NameAttribute(NameOID.ORGANIZATION_NAME, "SimFed"),
                x509.NameAttribute(NameOID.COMMON_NAME, common_name),
            ]
        )
        return (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(self.cert.subject)
            .public_key(key.public_key())
            .serial_number(serial)
            .not_valid_before(_utc(not_before))
            .not_valid_after(_utc(not_after))
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .add_extension(
                x509.KeyUsage(True, False, True, False, False, False, False, False, False), critical=True
            )
            .sign(self.key, hashes.SHA256())
        )


@pytest.fixture(scope="session")
def mini_ca(tmp_path_factory):
    key = cached_key(99)
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "Mini Test CA")])
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(1)
        .not_valid_before(_utc(T0 - 86_400))
        .not_valid_after(_utc(T0 + 10 * 365 * 86_400))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(x509.KeyUsage(False, False, False, False, False, True, True, False, False), critical=True)
        .sign(key, hashes.SHA256())
    )
    path = tmp_path_factory.mktemp("mini-ca") / "ca.pem"
    path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    return MiniCA(key, cert, path)


@pytest.fixture
def provisioned(mini_ca, tmp_path):
    """A pre-existing user credential: cert + passphrase-encrypted key on disk."""
    from gridcert.model import Credential, SubjectDn

    def make(cn="alice", lifetime=1_000_000, start=T0, slot=1, passphrase="pw", serial=1000):
        key = cached_key(slot)
        cert = mini_ca.issue(cn, key, start, start + lifetime, serial)
        d = tmp_path / f"cred-{cn}-{serial}"
        d.mkdir()
        (d / "usercert.pem").write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        (d / "userkey.pem").write_bytes(
            key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.BestAvailableEncryption(passphrase.encode()),
            )
        )
        (d / "passphrase").write_text(passphrase)
        subject = SubjectDn((("C", "CH"), ("O", "SimFed"), ("CN", cn)))
        return Credential(d / "usercert.pem", d / "userkey.pem", passphrase, subject, start, start + lifetime)

    return make


# --------------------------------------------------------------------------
# Independent oracle: the OpenSSL command-line verifier.


def openssl_verify(ca_pem, targets, at: int, untrusted=None) -> dict[str, bool]:
    """Verify many certificate files in one ``openssl verify`` run.

    ``targets`` may be proxies (then ``untrusted`` must hold the end-entity
    certificate). Returns ``{path: ok}`` parsed from openssl's per-file lines.
    """
    targets = [str(t) for t in targets]
    cmd = [OPENSSL, "verify", "-attime", str(at), "-allow_proxy_certs", "-CAfile", str(ca_pem)]
    if untrusted:
        cmd += ["-untrusted", str(untrusted)]
    proc = subprocess.run(cmd + targets, capture_output=True, text=True)
    ok = {t: False for t in targets}
    for line in proc.stdout.splitlines():
        for t in targets:
            if line == f"{t}: OK":
                ok[t] = True
    return ok


def openssl_verify_pairs(ca_pem, pairs, at: int) -> dict[str, bool]:
    """Verify (proxy, end-entity) pairs, grouping by end-entity file."""
    by_ee: dict[str, list] = {}
    for proxy, ee in pairs:
        by_ee.setdefault(str(ee), []).append(proxy)
    result = {}
    for ee, proxies in by_ee.items():
        result.update(openssl_verify(ca_pem, proxies, at, untrusted=ee))
    return result


@pytest.fixture
def oracle():
    return openssl_verify
