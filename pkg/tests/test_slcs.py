import json
import os
import stat

import pytest
from cryptography.hazmat.primitives import serialization
from werkzeug.wrappers import Request, Response

from conftest import openssl_verify
from gridcert import _x509
from gridcert.ca import SlcsCA
from gridcert.errors import ExpiredAssertion, IssuanceFailed, StorageFailed
from gridcert.slcs import SlcsFactory, SlcsFactoryConfig, load_properties, new_slcs, random_passphrase
from gridcert.sso import IdentityProvider
from gridcert.web import ServiceThread


@pytest.fixture
def idp(clock):
    return IdentityProvider(users=["alice", "bob"], clock=clock)


@pytest.fixture
def ca(idp, clock):
    return SlcsCA({idp.entity_id: idp.public_key}, clock=clock)


@pytest.fixture
def ca_url(ca):
    with ServiceThread(ca) as svc:
        yield svc.url


@pytest.fixture
def store(tmp_path):
    d = tmp_path / "store"
    d.mkdir()
    return d


def _factory(ca, ca_url, store, clock, **kw):
    config = SlcsFactoryConfig(ca_url + "/slcs/login", ca_url + "/slcs/certificate", store, ca.certificate, **kw)
    return SlcsFactory(config, clock=clock)


def test_fresh_assertion_default_overrides(idp, ca, ca_url, store, clock, tmp_path):
    cred = new_slcs(_factory(ca, ca_url, store, clock), idp.issue_assertion(idp.login("alice")))
    assert str(cred.subject) == "/C=CH/O=SimFed/CN=alice"
    assert cred.lifetime == 1_000_000
    assert cred.certificate_path.parent == store and cred.private_key_path.parent == store
    assert len(cred.passphrase) >= 32

    key = cred.load_private_key()
    cert = cred.load_certificate()
    assert _x509.same_public_key(key.public_key(), cert.public_key())
    assert stat.S_IMODE(os.stat(cred.private_key_path).st_mode) == 0o600
    (tmp_path / "ca.pem").write_bytes(_x509.cert_pem(ca.certificate))
    assert openssl_verify(tmp_path / "ca.pem", [cred.certificate_path], clock.now())[str(cred.certificate_path)]


def test_key_file_is_encrypted(idp, ca, ca_url, store, clock):
    cred = new_slcs(_factory(ca, ca_url, store, clock), idp.issue_assertion(idp.login("alice")))
    data = cred.private_key_path.read_bytes()
    assert b"ENCRYPTED PRIVATE KEY" in data
    with pytest.raises((TypeError, ValueError)):
        serialization.load_pem_private_key(data, password=None)


def test_stale_assertion_leaves_store_empty(idp, ca, ca_url, store, clock):
    stale = idp.issue_assertion(idp.login("alice"), clock.now() - 400)
    with pytest.raises(ExpiredAssertion):
        new_slcs(_factory(ca, ca_url, store, clock), stale)
    assert list(store.iterdir()) == []
    assert ca.pending_tokens() == 0  # rejected before any network call


def test_explicit_overrides(idp, ca, ca_url, store, clock, tmp_path):
    cert_path, key_path = tmp_path / "mine" / "c.pem", tmp_path / "mine" / "k.pem"
    cred = new_slcs(
        _factory(ca, ca_url, store, clock),
        idp.issue_assertion(idp.login("alice")),
        certificate_path=cert_path,
        key_path=key_path,
        passphrase="pw",
        lifetime=7200,
    )
    assert (cred.certificate_path, cred.private_key_path) == (cert_path, key_path)
    key = serialization.load_pem_private_key(key_path.read_bytes(), password=b"pw")
    assert _x509.same_public_key(key.public_key(), _x509.load_cert(cert_path.read_bytes()).public_key())
    assert cred.lifetime == 7200


def test_storage_failure_leaves_nothing(idp, ca, ca_url, store, clock):
    blocker = store / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(StorageFailed):
        new_slcs(
            _factory(ca, ca_url, store, clock),
            idp.issue_assertion(idp.login("alice")),
            certificate_path=store / "ok" / "c.pem",
            key_path=blocker / "k.pem",
        )
    assert sorted(p.name for p in store.iterdir()) == ["blocker"]


def _rogue_ca(real_ca, other_ca, assertion):
    """Logs in honestly but hands back a certificate from a different CA."""

    def app(environ, start_response):
        request = Request(environ)
        if request.path == "/slcs/certificate":
            body = json.loads(request.get_data())
            token = other_ca.login(assertion).auth_token
            resp = Response(other_ca.sign_csr(body["csr"].encode(), token, 3600))
        else:
            resp = real_ca.dispatch(request)
        return resp(environ, start_response)

    return app


def test_certificate_from_wrong_ca_is_rejected(idp, ca, store, clock):
    other = SlcsCA({idp.entity_id: idp.public_key}, clock=clock)
    assertion = idp.issue_assertion(idp.login("alice"))
    with ServiceThread(_rogue_ca(ca, other, assertion)) as svc:
        with pytest.raises(IssuanceFailed):
            new_slcs(_factory(ca, svc.url, store, clock), assertion)
    assert list(store.iterdir()) == []


def test_ca_unreachable_is_issuance_failure(idp, ca, store, clock):
    f = _factory(ca, "http://127.0.0.1:9", store, clock)
    with pytest.raises(IssuanceFailed):
        new_slcs(f, idp.issue_assertion(idp.login("alice")))


def test_store_directory_must_be_writable(ca, tmp_path):
    with pytest.raises(StorageFailed):
        SlcsFactoryConfig("http://x/l", "http://x/s", tmp_path / "missing", ca.certificate)


def test_two_factories_coexist(idp, ca, ca_url, tmp_path, clock):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    a_dir.mkdir(), b_dir.mkdir()
    fa, fb = _factory(ca, ca_url, a_dir, clock), _factory(ca, ca_url, b_dir, clock)
    cred_a = fa.new_slcs(idp.issue_assertion(idp.login("alice")))
    cred_b = fb.new_slcs(idp.issue_assertion(idp.login("bob")))
    assert cred_a.certificate_path.parent == a_dir and cred_b.certificate_path.parent == b_dir
    assert str(cred_b.subject).endswith("CN=bob")


def test_properties_file(ca, tmp_path, store):
    anchor = tmp_path / "anchor.pem"
    anchor.write_bytes(_x509.cert_pem(ca.certificate))
    props = tmp_path / "gridcert.properties"
    props.write_text(
        "# SLCS client\n"
        "slcs-login-url = http://ca/slcs/login\n"
        "slcs-sign-url = http://ca/slcs/certificate\n"
        f"store-directory = {store}\n"
        f"ca-trust-anchor = {anchor}\n"
        "default-lifetime = 3600\n"
    )
    assert load_properties(props)["default-lifetime"] == "3600"
    config = SlcsFactoryConfig.from_properties(props)
    assert config.default_lifetime == 3600 and config.key_size == 2048
    assert config.ca_trust_anchor == ca.certificate


def test_random_passphrases_differ():
    seen = {random_passphrase() for _ in range(1000)}
    assert len(seen) == 1000
    assert all(p.isalnum() and len(p) == 32 for p in seen)
