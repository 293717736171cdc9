import subprocess
import sys
import time

import pytest
from cryptography.hazmat.primitives import serialization

from conftest import openssl_verify
from gridcert import _x509
from gridcert.cli import main
from gridcert.model import SubjectDn
from gridcert.proxy import load_proxy
from gridcert.voms import VomsServer
from gridcert.web import ServiceThread


def _fields(out):
    return dict(line.split(": ", 1) for line in out.splitlines() if ": " in line)


def _run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, _fields(out), err


@pytest.fixture
def issued(tmp_path, capsys):
    store = tmp_path / "store"
    code, fields, _ = _run(["slcs-init", "--user", "alice", "--self-contained", "--store-dir", str(store)], capsys)
    assert code == 0
    return store, fields


def test_slcs_init_self_contained(issued):
    store, fields = issued
    assert fields["subject"] == "/C=CH/O=SimFed/CN=alice"
    assert fields["lifetime"] == "1000000 s"
    now = int(time.time())
    assert openssl_verify(store / "ca.pem", [fields["certificate"]], now)[fields["certificate"]]


def test_slcs_init_reuses_local_ca(issued, capsys):
    store, first = issued
    code, second, _ = _run(["slcs-init", "--user", "alice", "--self-contained", "--store-dir", str(store)], capsys)
    assert code == 0 and second["certificate"] != first["certificate"]
    now = int(time.time())
    both = openssl_verify(store / "ca.pem", [first["certificate"], second["certificate"]], now)
    assert all(both.values())


def test_slcs_init_unknown_user(tmp_path, capsys):
    code, _, err = _run(["slcs-init", "--user", "mallory", "--self-contained", "--store-dir", str(tmp_path)], capsys)
    assert code == 1 and err.startswith("UnknownUser")


def test_slcs_init_clamps_lifetime(tmp_path, capsys):
    argv = ["slcs-init", "--user", "alice", "--self-contained", "--store-dir", str(tmp_path), "--lifetime", "2000000"]
    code, fields, err = _run(argv, capsys)
    assert code == 0 and "warning" in err and "clamped" in err
    assert fields["lifetime"] == "1000000 s"


def test_slcs_init_needs_config_or_self_contained(tmp_path, capsys):
    assert _run(["slcs-init", "--user", "alice", "--store-dir", str(tmp_path)], capsys)[0] == 2


def test_proxy_init_plain(issued, capsys):
    store, cred = issued
    code, fields, _ = _run(["proxy-init", "--cert", cred["certificate"], "--key", cred["key"]], capsys)
    assert code == 0 and fields["fqans"] == "-"
    assert int(fields["not-after"]) - int(time.time()) <= 43_200
    result = openssl_verify(store / "ca.pem", [fields["proxy"]], int(time.time()), untrusted=cred["certificate"])
    assert result[fields["proxy"]]


def test_proxy_init_life_self_contained(issued, capsys):
    store, cred = issued
    argv = ["proxy-init", "--cert", cred["certificate"], "--key", cred["key"], "--vos", "life"]
    argv += ["--self-contained", "--ca-cert", str(store / "ca.pem")]
    code, fields, _ = _run(argv, capsys)
    assert code == 0 and fields["fqans"] == "/life"
    assert [str(f) for f in load_proxy(fields["proxy"]).fqans] == ["/life"]


def test_proxy_init_life_from_config(issued, tmp_path, capsys):
    store, cred = issued
    anchor = _x509.load_cert((store / "ca.pem").read_bytes())
    server = VomsServer({"life": {"/C=CH/O=SimFed/CN=alice": []}}, [anchor])
    key_file = tmp_path / "voms.pub"
    key_file.write_bytes(
        server.public_key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo)
    )
    with ServiceThread(server) as svc:
        conf = tmp_path / "voms.conf"
        conf.write_text(f"voms.life.url = {svc.url}\nvoms.life.key = {key_file}\n")
        argv = ["proxy-init", "--cert", cred["certificate"], "--key", cred["key"], "--vos", "life", "--config", str(conf)]
        code, fields, _ = _run(argv, capsys)
    assert code == 0 and fields["fqans"] == "/life"
    assert load_proxy(fields["proxy"]).subject.rdns[:-1] == SubjectDn.parse(cred["subject"]).rdns


def test_proxy_init_unconfigured_vo(issued, capsys):
    _, cred = issued
    argv = ["proxy-init", "--cert", cred["certificate"], "--key", cred["key"], "--vos", "atlas"]
    code, _, err = _run(argv, capsys)
    assert code == 1 and err.startswith("UnknownVo")


def test_proxy_init_wrong_passphrase(issued, capsys):
    _, cred = issued
    argv = ["proxy-init", "--cert", cred["certificate"], "--key", cred["key"], "--passphrase", "nope"]
    assert _run(argv, capsys)[0] == 1


# -- demo, through the installed entry point ------------------------------------------------


def _demo(*args):
    return subprocess.run([sys.executable, "-m", "gridcert", "demo", *args], capture_output=True, text=True, timeout=300)


def test_demo_self_contained(tmp_path):
    r = _demo("--self-contained", "--workdir", str(tmp_path / "w"))
    assert r.returncode == 0, r.stderr
    assert "(7) proxy verification ok" in r.stdout


def test_demo_stale_assertion_walks_logout(tmp_path):
    r = _demo("--self-contained", "--stale-assertion", "--workdir", str(tmp_path / "w"))
    assert r.returncode == 0, r.stderr
    assert "/sp/logout" in r.stdout


def test_demo_services_down():
    r = _demo("--portal-url", "http://127.0.0.1:9", "--idp-url", "http://127.0.0.1:9")
    assert r.returncode == 1
