"""``gridcert`` command line: slcs-init, proxy-init and the portal demo."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import httpx
from cryptography.hazmat.primitives import serialization

from . import _x509
from .ca import SlcsCA
from .clock import SystemClock
from .errors import GridCertError
from .model import MAX_SLCS_LIFETIME, Credential
from .proxy import GridProxyFactory, ProxyFactoryConfig, VomsEndpoint, group_by_vo
from .slcs import SlcsFactory, SlcsFactoryConfig, load_properties, random_basename
from .store import CERT_NAME, KEY_NAME, PASSPHRASE_NAME, CredentialStore
from .sso import IdentityProvider, ecp_assertion
from .voms import VomsServer, load_public_key
from .web import ServiceThread

log = logging.getLogger("gridcert")

SELF_CONTAINED_USERS = ("alice", "bob")


def _fail(exc: BaseException) -> int:
    code = exc.code if isinstance(exc, GridCertError) else type(exc).__name__
    print(f"{code}: {exc}", file=sys.stderr)
    return 1


# -- slcs-init -------------------------------------------------------------


def _local_ca(store_dir: Path, idp, clock) -> SlcsCA:
    """The in-process CA, reusing its key from earlier runs in the same store."""
    cert_file, key_file = store_dir / "ca.pem", store_dir / "ca-key.pem"
    if cert_file.exists() and key_file.exists():
        key = serialization.load_pem_private_key(key_file.read_bytes(), password=None)
        cert = _x509.load_cert(cert_file.read_bytes())
        return SlcsCA({idp.entity_id: idp.public_key}, clock=clock, ca_key=key, ca_certificate=cert)
    key = _x509.generate_rsa_key(2048)
    ca = SlcsCA({idp.entity_id: idp.public_key}, clock=clock, ca_key=key)
    CredentialStore(store_dir).write_files(
        {key_file: (_x509.plain_key_pem(key), 0o600), cert_file: (_x509.cert_pem(ca.certificate), 0o644)}
    )
    return ca


@contextlib.contextmanager
def _self_contained_slcs(store_dir: Path, clock):
    idp = IdentityProvider(users=SELF_CONTAINED_USERS, clock=clock)
    ca = _local_ca(store_dir, idp, clock)
    with ServiceThread(idp) as idp_svc, ServiceThread(ca) as ca_svc:
        yield {
            "idp-url": idp_svc.url,
            "slcs-login-url": ca_svc.url + "/slcs/login",
            "slcs-sign-url": ca_svc.url + "/slcs/certificate",
            "ca-trust-anchor": str(store_dir / "ca.pem"),
        }


def cmd_slcs_init(args) -> int:
    if args.lifetime is not None and args.lifetime > MAX_SLCS_LIFETIME:
        print(
            f"warning: requested lifetime {args.lifetime} s exceeds the {MAX_SLCS_LIFETIME} s maximum "
            f"and will be clamped",
            file=sys.stderr,
        )
    props = load_properties(args.config) if args.config else {}
    store_dir = Path(args.store_dir or props.get("store-directory") or "gridcert-store").resolve()
    store_dir.mkdir(parents=True, exist_ok=True, mode=0o700)
    clock = SystemClock()

    if args.self_contained:
        services = _self_contained_slcs(store_dir, clock)
    elif props:
        services = contextlib.nullcontext(props)
    else:
        print("error: pass --config FILE or --self-contained", file=sys.stderr)
        return 2

    try:
        with services as endpoints, httpx.Client(timeout=30.0) as http:
            config = SlcsFactoryConfig.from_properties(dict(props, **endpoints, **{"store-directory": str(store_dir)}))
            assertion = ecp_assertion(endpoints["idp-url"], args.user, http)
            # One directory per credential, laid out like the gateway's.
            target = store_dir / random_basename()
            cred = SlcsFactory(config, clock=clock, http=http).new_slcs(
                assertion,
                certificate_path=target / CERT_NAME,
                key_path=target / KEY_NAME,
                lifetime=args.lifetime,
                store_passphrase=True,
            )
    except (GridCertError, httpx.HTTPError, KeyError, OSError) as exc:
        return _fail(exc)

    print(f"certificate: {cred.certificate_path}")
    print(f"key: {cred.private_key_path}")
    print(f"subject: {cred.subject}")
    print(f"passphrase file: {target / PASSPHRASE_NAME}")
    print(f"lifetime: {cred.lifetime} s")
    return 0


# -- proxy-init ------------------------------------------------------------


def _load_credential(args) -> Credential:
    if args.passphrase_file:
        passphrase = Path(args.passphrase_file).read_text().strip()
    elif args.passphrase is not None:
        passphrase = args.passphrase
    else:
        candidate = Path(args.key).parent / PASSPHRASE_NAME
        passphrase = candidate.read_text() if candidate.exists() else None
    cert = _x509.load_cert(Path(args.cert).read_bytes())
    return Credential(
        Path(args.cert),
        Path(args.key),
        passphrase,
        _x509.dn_from_name(cert.subject),
        _x509.not_before(cert),
        _x509.not_after(cert),
    )


def _voms_endpoints_from(props) -> dict[str, VomsEndpoint]:
    """``voms.<vo>.url`` and ``voms.<vo>.key`` (issuer public key PEM file) entries."""
    endpoints = {}
    for name, value in props.items():
        parts = name.split(".")
        if len(parts) == 3 and parts[0] == "voms" and parts[2] == "url":
            key = load_public_key(Path(props[f"voms.{parts[1]}.key"]).read_bytes())
            endpoints[parts[1]] = VomsEndpoint(value, key)
    return endpoints


def cmd_proxy_init(args) -> int:
    vos = [v for v in (args.vos or "").split(",") if v]
    props = load_properties(args.config) if args.config else {}
    try:
        credential = _load_credential(args)
        out_dir = Path(args.out_dir or props.get("proxy-store-directory") or Path(args.cert).parent).resolve()
        clock = SystemClock()
        with contextlib.ExitStack() as stack:
            if args.self_contained and vos:
                if not args.ca_cert:
                    print("error: --self-contained with --vos needs --ca-cert", file=sys.stderr)
                    return 2
                anchor = _x509.load_cert(Path(args.ca_cert).read_bytes())
                # A throwaway VOMS server that enrols the holder in each requested VO.
                voms = VomsServer({vo: {str(credential.subject): fq} for vo, fq in group_by_vo(vos).items()}, [anchor], clock)
                svc = stack.enter_context(ServiceThread(voms))
                endpoints = {vo: VomsEndpoint(svc.url, voms.public_key) for vo in group_by_vo(vos)}
            else:
                endpoints = _voms_endpoints_from(props)
            http = stack.enter_context(httpx.Client(timeout=30.0))
            factory = GridProxyFactory(ProxyFactoryConfig(out_dir, endpoints), clock=clock, http=http)
            path = Path(args.out).resolve() if args.out else None
            proxy = factory.new_proxy(credential, vos, args.lifetime, proxy_path=path)
    except (GridCertError, httpx.HTTPError, OSError, ValueError, TypeError) as exc:
        return _fail(exc)

    print(f"proxy: {proxy.path}")
    print(f"subject: {proxy.subject}")
    print(f"fqans: {' '.join(str(f) for f in proxy.fqans) or '-'}")
    print(f"not-after: {proxy.not_after}")
    return 0


# -- demo ------------------------------------------------------------------


def cmd_demo(args) -> int:
    from .demo import run_demo, run_remote_flow

    try:
        if args.self_contained:
            result = run_demo(args.user, stale_assertion=args.stale_assertion, root=args.workdir)
        elif args.portal_url and args.idp_url:
            result = run_remote_flow(args.idp_url, args.portal_url, args.user)
        else:
            print("error: pass --self-contained or both --portal-url and --idp-url", file=sys.stderr)
            return 2
    except (GridCertError, httpx.HTTPError, OSError) as exc:
        return _fail(exc)
    if result["status"] != 200 or not result["verified"]:
        print(f"demo failed: final status {result['status']}, verified={result['verified']}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcert", description="Short-lived grid credentials from SSO logins.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("slcs-init", help="obtain a short-lived user certificate")
    p.add_argument("--user", required=True, help="federated user id")
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--store-dir", help="where certificate and key are written")
    p.add_argument("--lifetime", type=int, help=f"requested lifetime in seconds (max {MAX_SLCS_LIFETIME})")
    p.add_argument("--self-contained", action="store_true", help="run IdP and CA in-process")
    p.set_defaults(func=cmd_slcs_init)

    p = sub.add_parser("proxy-init", help="create a proxy certificate, optionally with VO attributes")
    p.add_argument("--cert", required=True)
    p.add_argument("--key", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--passphrase", help="private key passphrase")
    group.add_argument("--passphrase-file", help="file holding the private key passphrase")
    p.add_argument("--vos", default="", help="comma-separated VO names or FQANs")
    p.add_argument("--lifetime", type=int, help="proxy lifetime in seconds")
    p.add_argument("--config", help="configuration file with voms.<vo>.url / voms.<vo>.key entries")
    p.add_argument("--out", help="proxy file to write")
    p.add_argument("--out-dir", help="directory for a randomly named proxy file")
    p.add_argument("--self-contained", action="store_true", help="run a VOMS server in-process")
    p.add_argument("--ca-cert", help="CA certificate the in-process VOMS server trusts")
    p.set_defaults(func=cmd_proxy_init)

    p = sub.add_parser("demo", help="walk a browser through portal, SSO, CA and VOMS")
    p.add_argument("--user", default="alice")
    p.add_argument("--self-contained", action="store_true", help="boot every service in-process")
    p.add_argument("--stale-assertion", action="store_true", help="force the assertion renewal chain")
    p.add_argument("--workdir", type=Path, help="keep the credential store here instead of a temp dir")
    p.add_argument("--portal-url", help="external portal base URL")
    p.add_argument("--idp-url", help="external IdP base URL")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
