"""Boot every simulator on loopback ports and walk a user through the portal.

The demo portal has two pages, ``/portal/certificate`` (needs a user
certificate) and ``/portal/compute`` (needs a VO proxy). A scripted browser
logs in at the IdP once and then only follows redirects.
"""

from __future__ import annotations

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx

from . import _x509
from .browser import ScriptedBrowser
from .ca import SlcsCA
from .clock import MockClock
from .gateway import PORTAL_COOKIE, CredentialGateway, GatewayConfig, Portal, PortalConfig
from .model import Assertion
from .proxy import GridProxyFactory, ProxyFactoryConfig, VomsEndpoint, load_proxy, verify_proxy
from .slcs import SlcsFactory, SlcsFactoryConfig
from .sso import DEFAULT_COOKIE_WHITELIST, IdentityProvider, ServiceProvider
from .voms import VomsServer
from .web import ServiceThread

log = logging.getLogger(__name__)

DEMO_USERS = ("alice", "bob")
DEMO_VO = "life"


def _show_env(request, env) -> str:
    return "".join(f"{name}={value}\n" for name, value in sorted(env.items()))


@dataclass
class Deployment:
    """IdP, SLCS CA, VOMS server, credential gateway and portal sharing one clock."""

    root: Path
    clock: MockClock = field(default_factory=MockClock)
    users: tuple[str, ...] = DEMO_USERS
    vo_members: tuple[str, ...] = ("alice",)
    portal_vos: tuple[str, ...] = (DEMO_VO,)

    def __post_init__(self):
        self.root = Path(self.root)
        self.store_root = self.root / "store"
        self.store_root.mkdir(parents=True, exist_ok=True, mode=0o700)
        self.idp = IdentityProvider(users=self.users, clock=self.clock)
        idp_keys = {self.idp.entity_id: self.idp.public_key}
        self.ca = SlcsCA(idp_keys, clock=self.clock)
        self.voms = VomsServer({DEMO_VO: {}}, [self.ca.certificate], clock=self.clock)
        for user in self.vo_members:
            self.voms.add_member(DEMO_VO, self.ca.dn_mapping(_fake_assertion(user)))
        # All services share 127.0.0.1, so the SP logout would otherwise drop the portal cookie.
        (self.root / "ca.pem").write_bytes(_x509.cert_pem(self.ca.certificate))
        self.sp = ServiceProvider(idp_keys, clock=self.clock, cookie_whitelist=DEFAULT_COOKIE_WHITELIST | {PORTAL_COOKIE})
        self.services: dict[str, ServiceThread] = {}
        self.http = httpx.Client(timeout=30.0)

    # -- lifecycle --------------------------------------------------------

    def start(self) -> "Deployment":
        self.services["idp"] = ServiceThread(self.idp, name="idp").start()
        self.services["ca"] = ServiceThread(self.ca, name="ca").start()
        self.services["voms"] = ServiceThread(self.voms, name="voms").start()

        slcs = SlcsFactory(
            SlcsFactoryConfig(
                self.url("ca") + "/slcs/login", self.url("ca") + "/slcs/certificate", self.store_root, self.ca.certificate
            ),
            clock=self.clock,
            http=self.http,
        )
        proxies = GridProxyFactory(
            ProxyFactoryConfig(self.store_root, {DEMO_VO: VomsEndpoint(self.url("voms"), self.voms.public_key)}),
            clock=self.clock,
            http=self.http,
        )
        self.gateway = CredentialGateway(
            slcs, proxies, GatewayConfig(self.store_root, require_handshake=True, prefix_allowlist=self.store_root), self.clock
        )
        self.services["gateway"] = ServiceThread(
            self.gateway.wsgi_app(self.sp, self.url("idp") + "/idp/assert"), name="gateway"
        ).start()

        self.portal = Portal(
            PortalConfig(
                store_root=self.store_root,
                gateway_url=self.url("gateway"),
                idp_assert_url=self.url("idp") + "/idp/assert",
                idp_keys={self.idp.entity_id: self.idp.public_key},
                vos=self.portal_vos,
            ),
            clock=self.clock,
        )
        self.portal.route("/portal/certificate", _show_env, requires="certificate")
        self.portal.route("/portal/compute", _show_env, requires="proxy")
        self.services["portal"] = ServiceThread(self.portal, name="portal").start()
        return self

    def stop(self) -> None:
        for svc in reversed(list(self.services.values())):
            svc.stop()
        self.services.clear()
        self.http.close()

    def __enter__(self) -> "Deployment":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def url(self, name: str) -> str:
        return self.services[name].url

    def browser(self) -> ScriptedBrowser:
        return ScriptedBrowser()


def _fake_assertion(user: str) -> Assertion:
    # Only the subject matters to the DN mapping.
    return Assertion(subject=user, issuer="", issued_at=0)


def _parse_env(text: str) -> dict[str, str]:
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def walk_portal(browser: ScriptedBrowser, page_url: str, say: Callable[[str], None] = print):
    """GET a guarded page, printing the hop trace; returns (response, hops, environment)."""
    mark = len(browser.trace)
    say(f"(2) GET {page_url}")
    response = browser.get(page_url)
    hops = browser.hops_since(mark)
    for hop in hops:
        say(f"    {hop.status} {hop.url}")
    return response, hops, _parse_env(response.text)


def run_remote_flow(idp_url: str, portal_url: str, user: str = "alice", say: Callable[[str], None] = print) -> dict:
    """The same walk against already running services.

    Without the CA and VOMS anchors only the outcome can be checked: the
    guarded page must answer 200 and export a proxy path.
    """
    with ScriptedBrowser() as browser:
        say(f"(1) {user} logs in at the IdP ({idp_url})")
        browser.login(idp_url, user)
        response, hops, env = walk_portal(browser, portal_url.rstrip("/") + "/portal/compute", say)
    return {
        "status": response.status_code,
        "environment": env,
        "hops": len(hops),
        "renewed": any("/sp/logout" in h.url for h in hops),
        "fqans": [],
        "verified": response.status_code == 200 and "X509_USER_PROXY" in env,
    }


def run_demo(
    user: str = "alice",
    stale_assertion: bool = False,
    root: Path | None = None,
    say: Callable[[str], None] = print,
) -> dict:
    """Walk the portal flow end to end and return what was observed."""
    with tempfile.TemporaryDirectory(prefix="gridcert-demo-") as tmp:
        with Deployment(Path(root or tmp)) as dep:
            browser = dep.browser()
            say(f"(1) {user} logs in at the IdP ({dep.url('idp')})")
            browser.login(dep.url("idp"), user)

            if stale_assertion:
                # Get an SP session at the gateway, then let its assertion go stale.
                mark = len(browser.trace)
                browser.get(dep.url("gateway") + "/gcl/slcs-init?return=" + dep.url("portal") + "/portal/login")
                dep.clock.advance(301)
                say(f"    pre-warmed gateway session, clock advanced 301 s ({len(browser.trace) - mark} hops)")

            response, hops, env = walk_portal(browser, dep.url("portal") + "/portal/compute", say)
            say("(3) certificate issued: " + env.get("X509_USER_CERT", "<none>"))
            say("(4) proxy issued: " + env.get("X509_USER_PROXY", "<none>"))

            proxy = load_proxy(env["X509_USER_PROXY"]) if "X509_USER_PROXY" in env else None
            check = None
            if proxy is not None:
                check = verify_proxy(
                    proxy, dep.ca.certificate, dep.clock.now(), {DEMO_VO: dep.voms.public_key}
                )
                say(f"(5) proxy subject {_x509.dn_from_name(proxy.certificate.subject)}")
                say(f"(6) VO attributes {' '.join(str(f) for f in proxy.fqans) or '<none>'}")
                say(f"(7) proxy verification {'ok' if check.ok else 'FAILED: ' + '; '.join(check.reasons)}")
            browser.close()
            return {
                "status": response.status_code,
                "environment": env,
                "hops": len(hops),
                "renewed": any("/sp/logout" in h.url for h in hops),
                "fqans": [str(f) for f in proxy.fqans] if proxy else [],
                "verified": bool(check),
            }
