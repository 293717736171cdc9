import json
import subprocess
import threading

import httpx
import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization

from conftest import cached_key, openssl_verify
from gridcert import _x509
from gridcert.ca import SlcsCA
from gridcert.errors import DnMismatch, ExpiredAssertion, InvalidAssertion, InvalidToken, WeakKey
from gridcert.model import SubjectDn
from gridcert.slcs import build_csr
from gridcert.sso import IdentityProvider
from gridcert.web import ServiceThread

ALICE = "/C=CH/O=SimFed/CN=alice"


@pytest.fixture
def idp(clock):
    return IdentityProvider(users=["alice", "bob"], clock=clock)


@pytest.fixture
def ca(idp, clock):
    return SlcsCA({idp.entity_id: idp.public_key}, clock=clock)


@pytest.fixture
def assertion(idp):
    return idp.issue_assertion(idp.login("alice"))


def _csr(dn=ALICE, slot=1):
    return build_csr(cached_key(slot), SubjectDn.parse(dn))


def _weak_csr(dn):
    # build_csr refuses small keys, so assemble this one by hand.
    key = cached_key(7, 1024)
    csr = x509.CertificateSigningRequestBuilder().subject_name(_x509.name_from_dn(SubjectDn.parse(dn)))
    return csr.sign(key, hashes.SHA256()).public_bytes(serialization.Encoding.PEM)


# -- login ----------------------------------------------------------------------


def test_login_maps_dn_and_constraints(ca, assertion):
    r = ca.login(assertion)
    assert str(r.dn) == ALICE
    assert r.constraints.max_lifetime == 1_000_000
    assert len(r.auth_token) >= 43  # 256 bits, url-safe base64


def test_login_with_stale_assertion(ca, idp, clock):
    a = idp.issue_assertion(idp.login("alice"), clock.now() - 400)
    with pytest.raises(ExpiredAssertion):
        ca.login(a)


def test_login_with_forged_assertion(ca, clock):
    rogue = IdentityProvider(users=["alice"], clock=clock)
    with pytest.raises(InvalidAssertion):
        ca.login(rogue.issue_assertion(rogue.login("alice")))


def test_repeated_login_gives_distinct_tokens(ca, assertion):
    a, b = ca.login(assertion), ca.login(assertion)
    assert a.auth_token != b.auth_token and a.dn == b.dn


# -- signing ----------------------------------------------------------------------


def test_sign_full_lifetime(ca, assertion, clock):
    token = ca.login(assertion).auth_token
    cert = _x509.load_cert(ca.sign_csr(_csr(), token, 1_000_000))
    assert _x509.not_before(cert) == clock.now()
    assert _x509.not_after(cert) == clock.now() + 1_000_000
    assert str(_x509.dn_from_name(cert.subject)) == ALICE


def test_sign_caps_lifetime(ca, assertion, clock):
    token = ca.login(assertion).auth_token
    cert = _x509.load_cert(ca.sign_csr(_csr(), token, 2_000_000))
    assert _x509.not_after(cert) - _x509.not_before(cert) == 1_000_000


def test_token_is_single_use(ca, assertion):
    token = ca.login(assertion).auth_token
    ca.sign_csr(_csr(), token, 3600)
    with pytest.raises(InvalidToken):
        ca.sign_csr(_csr(), token, 3600)


def test_token_expires(ca, assertion, clock):
    token = ca.login(assertion).auth_token
    with pytest.raises(InvalidToken):
        ca.sign_csr(_csr(), token, 3600, now=clock.now() + 301)


def test_dn_mismatch_keeps_token(ca, assertion):
    token = ca.login(assertion).auth_token
    with pytest.raises(DnMismatch):
        ca.sign_csr(_csr("/C=CH/O=SimFed/CN=mallory"), token, 3600)
    assert ca.sign_csr(_csr(), token, 3600)


def test_weak_key(ca, assertion):
    token = ca.login(assertion).auth_token
    with pytest.raises(WeakKey):
        ca.sign_csr(_weak_csr(ALICE), token, 3600)


def test_build_csr_rejects_weak_key():
    with pytest.raises(WeakKey):
        build_csr(cached_key(7, 1024), SubjectDn.parse("/CN=alice"))


def test_csr_subject_is_copied():
    csr = x509.load_pem_x509_csr(build_csr(cached_key(1), SubjectDn.parse("/CN=alice")))
    assert str(_x509.dn_from_name(csr.subject)) == "/CN=alice"


def test_serials_unique_and_certs_verify_with_openssl(ca, idp, clock, tmp_path):
    paths, serials = [], set()
    for i, user in enumerate(["alice", "bob"] * 5):
        a = idp.issue_assertion(idp.login(user))
        r = ca.login(a)
        pem = ca.sign_csr(build_csr(cached_key(i % 3), r.dn), r.auth_token, 10_000 * (i + 1))
        serials.add(_x509.load_cert(pem).serial_number)
        paths.append(tmp_path / f"c{i}.pem")
        paths[-1].write_bytes(pem)
    assert len(serials) == 10
    (tmp_path / "ca.pem").write_bytes(_x509.cert_pem(ca.certificate))
    assert all(openssl_verify(tmp_path / "ca.pem", paths, clock.now() + 1).values())


def test_openssl_renders_same_dn(ca, assertion, tmp_path):
    r = ca.login(assertion)
    (tmp_path / "c.pem").write_bytes(ca.sign_csr(_csr(), r.auth_token, 3600))
    out = subprocess.run(
        ["openssl", "x509", "-in", str(tmp_path / "c.pem"), "-noout", "-subject", "-nameopt", "compat"],
        capture_output=True,
        text=True,
        check=True,
    ).stdout.strip()
    assert out == "subject=" + ALICE


def test_concurrent_sign_single_winner(ca, assertion):
    token = ca.login(assertion).auth_token
    csr = _csr()
    barrier, outcomes = threading.Barrier(8), []

    def attempt():
        barrier.wait()
        try:
            ca.sign_csr(csr, token, 3600)
            outcomes.append("ok")
        except InvalidToken:
            outcomes.append("InvalidToken")

    threads = [threading.Thread(target=attempt) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(outcomes) == ["InvalidToken"] * 7 + ["ok"]


# -- HTTP -------------------------------------------------------------------------


def test_http_endpoints(ca, assertion, idp, clock):
    with ServiceThread(ca) as svc:
        r = httpx.post(svc.url + "/slcs/login", content=assertion.to_json())
        assert r.status_code == 200 and r.json()["dn"] == ALICE
        body = {"csr": _csr().decode(), "token": r.json()["token"], "lifetime": 5000}
        c = httpx.post(svc.url + "/slcs/certificate", content=json.dumps(body))
        assert c.status_code == 200 and b"BEGIN CERTIFICATE" in c.content
        again = httpx.post(svc.url + "/slcs/certificate", content=json.dumps(body))
        assert (again.status_code, again.json()["error"]) == (403, "InvalidToken")

        stale = idp.issue_assertion(idp.login("alice"), clock.now() - 400)
        r = httpx.post(svc.url + "/slcs/login", content=stale.to_json())
        assert (r.status_code, r.json()["error"]) == (401, "ExpiredAssertion")
        assert httpx.post(svc.url + "/slcs/login", content=b"{").status_code == 400
        assert httpx.get(svc.url + "/slcs/login").status_code == 405
        assert b"BEGIN CERTIFICATE" in httpx.get(svc.url + "/slcs/ca.pem").content
