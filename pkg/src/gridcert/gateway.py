"""HTTP front-ends: the credential endpoints and a portal with access guards.

Two separately bootable services talk only through browser redirects and
cookies:

* :class:`CredentialGateway` hosts ``/gcl/slcs-init`` (SSO-protected),
  ``/gcl/voms-proxy-init`` (unprotected) and, through :class:`~gridcert.sso.SpFrontend`,
  ``/gcl/renew/<encoded-url>`` and the SP logout URL.
* :class:`Portal` is a web application whose views can be wrapped with
  :meth:`Portal.certificate_required` / :meth:`Portal.gridproxy_required`.
  A guard passes when the user's files are fresh, exporting their paths;
  otherwise it prepares a marker handshake and redirects to the gateway,
  which writes into the handshake directory and sends the browser back.
"""

from __future__ import annotations

import logging
import os
import secrets
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping
from urllib.parse import parse_qsl, urlencode, urlsplit, urlunsplit

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from werkzeug.routing import Map, Rule
from werkzeug.utils import redirect
from werkzeug.wrappers import Request, Response

from . import _x509
from .clock import SystemClock
from .errors import (
    AttributeDenied,
    CredentialExpired,
    ExpiredAssertion,
    GridCertError,
    HandshakeRejected,
    InvalidAssertion,
    IssuanceFailed,
    MalformedFqan,
    StorageFailed,
    UnknownVo,
    UrlTooLong,
)
from .model import Assertion, Credential, b64d
from .proxy import GridProxyFactory
from .slcs import SlcsFactory
from .sso import ASSERTION_PARAM, SpFrontend, ServiceProvider, add_query, raw_url
from .store import (
    CERT_NAME,
    KEY_NAME,
    PASSPHRASE_NAME,
    PROXY_NAME,
    CredentialStore,
    check_prefix,
    consume_handshake,
    freshness_check,
    prepare_handshake,
)
from .web import WsgiService

log = logging.getLogger(__name__)

ENV_NAMES = {"certificate": "X509_USER_CERT", "key": "X509_USER_KEY", "proxy": "X509_USER_PROXY"}
LOCATION_COOKIE = "gcl-location"
SECRET_COOKIE = "gcl-secret"
PORTAL_COOKIE = "portal-session"


def load_credential(directory: os.PathLike | str) -> Credential:
    """Credential stored by the gateway: cert, encrypted key and passphrase file."""
    directory = Path(directory)
    cert_path, key_path = directory / CERT_NAME, directory / KEY_NAME
    cert = _x509.load_cert(cert_path.read_bytes())
    key_path.stat()
    passphrase = (directory / PASSPHRASE_NAME).read_text()
    return Credential(
        cert_path, key_path, passphrase, _x509.dn_from_name(cert.subject), _x509.not_before(cert), _x509.not_after(cert)
    )


def _without_param(url: str, name: str) -> str:
    parts = urlsplit(url)
    query = parse_qsl(parts.query, keep_blank_values=True)
    if not any(k == name for k, _ in query):
        return url
    return urlunsplit(parts._replace(query=urlencode([(k, v) for k, v in query if k != name])))


def _text(body: str, status: int = 200) -> Response:
    return Response(body, status=status, mimetype="text/plain")


# --------------------------------------------------------------------------
# Credential endpoints


@dataclass
class GatewayConfig:
    store_root: Path
    require_handshake: bool = False
    prefix_allowlist: Path | None = None
    slcs_path: str = "/gcl/slcs-init"
    proxy_path: str = "/gcl/voms-proxy-init"
    renew_path: str = "/gcl/renew"
    logout_path: str = "/sp/logout"
    location_cookie: str = LOCATION_COOKIE
    secret_cookie: str = SECRET_COOKIE

    def __post_init__(self):
        self.store_root = Path(self.store_root)
        if self.prefix_allowlist is not None:
            self.prefix_allowlist = Path(self.prefix_allowlist)


class CredentialGateway(WsgiService):
    """The SlcsInit / VomsProxyInit endpoints."""

    def __init__(
        self,
        slcs_factory: SlcsFactory | None,
        proxy_factory: GridProxyFactory | None,
        config: GatewayConfig,
        clock=None,
    ):
        self.slcs = slcs_factory
        self.proxies = proxy_factory
        self.config = config
        self.clock = clock or SystemClock()
        self.store = CredentialStore(config.store_root)
        self.url_map = Map(
            [
                Rule(config.slcs_path, endpoint="slcs_init", methods=["GET"]),
                Rule(config.proxy_path, endpoint="voms_proxy_init", methods=["GET"]),
            ]
        )

    def wsgi_app(self, sp: ServiceProvider, idp_assert_url: str) -> SpFrontend:
        """This gateway behind an SP layer protecting the SLCS endpoint."""
        return SpFrontend(
            self,
            sp,
            idp_assert_url,
            protected=[self.config.slcs_path],
            logout_path=self.config.logout_path,
            renew_path=self.config.renew_path,
        )

    def _authorize(self, request: Request):
        return consume_handshake(
            request.cookies.get(self.config.location_cookie, ""),
            request.cookies.get(self.config.secret_cookie, ""),
            self.config.prefix_allowlist,
        )

    def _done(self, request: Request) -> Response:
        target = request.args.get("return")
        if target:
            return redirect(target, 303)
        return _text("")

    def on_slcs_init(self, request: Request) -> Response:
        session = request.environ.get("gridcert.sp_session")
        frontend: SpFrontend | None = request.environ.get("gridcert.sp_frontend")
        if session is None or self.slcs is None:
            return _text("no single sign-on session\n", 401)
        assertion = session.assertion
        # A consumed, now stale assertion must not ride along into the renewal.
        here = _without_param(raw_url(request), ASSERTION_PARAM)

        if assertion.expired(self.clock.now()):
            return self._renew(request, frontend, here)

        if self.config.require_handshake:
            try:
                target = self._authorize(request).location
            except HandshakeRejected as exc:
                return _text(f"{exc.code}: {exc}\n", 403)
        else:
            target = self.store.user_dir(assertion.subject) / secrets.token_hex(8)

        try:
            cred = self.slcs.new_slcs(
                assertion,
                certificate_path=target / CERT_NAME,
                key_path=target / KEY_NAME,
                store_passphrase=True,
            )
        except ExpiredAssertion:
            return self._renew(request, frontend, here)
        except (IssuanceFailed, InvalidAssertion, StorageFailed) as exc:
            return _text(f"{exc.code}: {exc}\n", 502)

        if self.config.require_handshake:
            return self._done(request)
        # The passphrase stays on disk next to the key; it is never sent back.
        return _text(
            f"certificate: {cred.certificate_path}\n"
            f"key: {cred.private_key_path}\n"
            f"subject: {cred.subject}\n"
            f"credential: {target}\n"
        )

    def _renew(self, request: Request, frontend: SpFrontend | None, here: str) -> Response:
        if frontend is None:
            return _text("assertion expired and no renewal endpoint is configured\n", 401)
        try:
            return redirect(frontend.renewal_url(request, here), 302)
        except UrlTooLong as exc:
            return _text(f"{exc.code}: {exc}\n", 414)

    def on_voms_proxy_init(self, request: Request) -> Response:
        if self.proxies is None:
            return _text("proxy generation is not configured\n", 404)
        vos = [v for v in request.args.get("vos", "").split(",") if v]
        try:
            lifetime = int(request.args["lifetime"]) if request.args.get("lifetime") else None
        except ValueError:
            return _text("lifetime must be an integer\n", 400)
        locator = request.args.get("credential", "")

        proxy_file = None
        if self.config.require_handshake:
            try:
                proxy_file = self._authorize(request).path(PROXY_NAME)
                if self.config.prefix_allowlist is not None:
                    check_prefix(locator, self.config.prefix_allowlist)
            except HandshakeRejected as exc:
                return _text(f"{exc.code}: {exc}\n", 403)

        try:
            credential = load_credential(locator) if locator else None
        except (OSError, ValueError):
            credential = None
        if credential is None:
            return _text("certificate and private key not found\n", 404)

        try:
            proxy = self.proxies.new_proxy(credential, vos, lifetime, proxy_path=proxy_file)
        except (UnknownVo, MalformedFqan) as exc:
            return _text(f"{exc.code}: {exc}\n", 400)
        except AttributeDenied as exc:
            return _text(f"{exc.code}: {exc}\n", 502)
        except CredentialExpired as exc:
            return _text(f"{exc.code}: {exc}\n", 409)
        except StorageFailed as exc:
            return _text(f"{exc.code}: {exc}\n", 500)

        if self.config.require_handshake:
            return self._done(request)
        fqans = " ".join(str(f) for f in proxy.fqans)
        return _text(f"proxy: {proxy.path}\nfqans: {fqans}\n")


# --------------------------------------------------------------------------
# Portal with access guards


@dataclass
class PortalConfig:
    store_root: Path
    gateway_url: str
    idp_assert_url: str
    idp_keys: Mapping[str, Ed25519PublicKey]
    vos: tuple[str, ...] = ("life",)
    vos_for_user: Callable[[str], Iterable[str]] | None = None
    certificate_min_remaining: int = 86_400
    proxy_min_remaining: int = 600
    proxy_lifetime: int | None = None
    prefix_allowlist: Path | None = None
    env_names: Mapping[str, str] = field(default_factory=lambda: dict(ENV_NAMES))
    slcs_path: str = "/gcl/slcs-init"
    proxy_path: str = "/gcl/voms-proxy-init"
    location_cookie: str = LOCATION_COOKIE
    secret_cookie: str = SECRET_COOKIE

    def __post_init__(self):
        self.store_root = Path(self.store_root)
        if self.prefix_allowlist is None:
            self.prefix_allowlist = self.store_root


@dataclass(frozen=True)
class GuardOutcome:
    """Either the view ran (``environment`` set) or the browser must go elsewhere."""

    environment: Mapping[str, str] | None = None
    redirect_to: str | None = None
    cookies: Mapping[str, str] = field(default_factory=dict)
    response: Response | None = None

    @property
    def passed(self) -> bool:
        return self.environment is not None

    def to_response(self) -> Response:
        if self.response is not None:
            return self.response
        resp = redirect(self.redirect_to, 302)
        for name, value in self.cookies.items():
            resp.set_cookie(name, value, path="/", httponly=True)
        return resp


View = Callable[[Request, Mapping[str, str]], "Response | str"]


class Portal(WsgiService):
    """A small portal: SSO login, session cookie, and guard-decorated views."""

    def __init__(self, config: PortalConfig, clock=None):
        self.config = config
        self.clock = clock or SystemClock()
        self.store = CredentialStore(config.store_root)
        self._sessions: dict[str, str] = {}
        self._lock = threading.Lock()
        self._views: dict[str, Callable[[Request], Response]] = {}
        self.url_map = Map([Rule("/portal/login", endpoint="login", methods=["GET"])])

    # -- views ------------------------------------------------------------

    def route(self, path: str, view: Callable, requires: str | None = None) -> None:
        if requires == "certificate":
            view = self.certificate_required(view)
        elif requires == "proxy":
            view = self.gridproxy_required(view)
        elif requires is None:
            view = self.login_required(view)
        else:
            raise ValueError(requires)
        endpoint = f"view_{len(self._views)}"
        self._views[endpoint] = view
        self.url_map.add(Rule(path, endpoint=endpoint, methods=["GET"]))

    def dispatch(self, request: Request) -> Response:
        adapter = self.url_map.bind_to_environ(request.environ)
        try:
            endpoint, values = adapter.match()
        except Exception as exc:  # werkzeug routing exceptions are responses
            return exc.get_response(request.environ)
        if endpoint in self._views:
            return self._views[endpoint](request)
        return getattr(self, f"on_{endpoint}")(request, **values)

    def user(self, request: Request) -> str | None:
        with self._lock:
            return self._sessions.get(request.cookies.get(PORTAL_COOKIE, ""))

    def on_login(self, request: Request) -> Response:
        next_url = request.args.get("next") or "/"
        incoming = request.args.get(ASSERTION_PARAM)
        if not incoming:
            here = add_query(request.host_url.rstrip("/") + "/portal/login", next=next_url)
            return redirect(add_query(self.config.idp_assert_url, **{"return": here}), 302)
        try:
            assertion = Assertion.from_json(b64d(incoming))
            key = self.config.idp_keys.get(assertion.issuer)
            if key is None or not assertion.verify(key) or assertion.expired(self.clock.now()):
                raise InvalidAssertion("assertion rejected")
        except (GridCertError, ValueError, KeyError) as exc:
            return _text(f"login failed: {exc}\n", 403)
        session_id = secrets.token_urlsafe(24)
        with self._lock:
            self._sessions[session_id] = assertion.subject
        resp = redirect(next_url, 302)
        resp.set_cookie(PORTAL_COOKIE, session_id, path="/", httponly=True)
        return resp

    def _to_login(self, request: Request) -> GuardOutcome:
        return GuardOutcome(redirect_to=add_query(request.host_url.rstrip("/") + "/portal/login", next=raw_url(request)))

    @staticmethod
    def _run(view: View, request: Request, env: Mapping[str, str]) -> Response:
        result = view(request, env)
        return _text(result) if isinstance(result, str) else result

    # -- guards -----------------------------------------------------------

    def vos_for(self, user: str) -> list[str]:
        if self.config.vos_for_user is not None:
            return list(self.config.vos_for_user(user))
        return list(self.config.vos)

    def _cert_files(self, user: str) -> tuple[Path, Path]:
        base = self.store.pointer(user, "cert")
        return base / CERT_NAME, base / KEY_NAME

    def _proxy_file(self, user: str) -> Path:
        return self.store.pointer(user, "proxy") / PROXY_NAME

    def _handshake(self, user: str) -> tuple[Path, dict[str, str]]:
        # The pointer is not moved here: it only ever names a directory that already holds fresh files.
        hs = prepare_handshake(self.config.store_root, user, self.config.prefix_allowlist, self.store.user_subdir)
        return hs.location, {self.config.location_cookie: str(hs.location), self.config.secret_cookie: hs.secret}

    def _adopt(self, request: Request, user: str, kind: str, names: tuple[str, ...], min_remaining: int, now: int) -> bool:
        """On the return visit, repoint ``current-<kind>`` at the directory the gateway just filled."""
        location = request.cookies.get(self.config.location_cookie)
        if not location:
            return False
        try:
            real = Path(check_prefix(location, self.store.user_dir(user)))
        except GridCertError:
            return False
        if not all(freshness_check(real / name, min_remaining, now) for name in names):
            return False
        self.store.point(user, kind, real)
        return True

    def _certificate_outcome(self, request: Request, user: str, now: int) -> GuardOutcome:
        cert, key = self._cert_files(user)
        minimum = self.config.certificate_min_remaining
        fresh = all(freshness_check(p, minimum, now) for p in (cert, key))
        if fresh or self._adopt(request, user, "cert", (CERT_NAME, KEY_NAME), minimum, now):
            names = self.config.env_names
            return GuardOutcome(environment={names["certificate"]: str(cert), names["key"]: str(key)})
        _, cookies = self._handshake(user)
        target = add_query(self.config.gateway_url.rstrip("/") + self.config.slcs_path, **{"return": raw_url(request)})
        return GuardOutcome(redirect_to=target, cookies=cookies)

    def guard_certificate(self, request: Request, next_handler: View | None = None) -> GuardOutcome:
        user = self.user(request)
        if user is None:
            return self._to_login(request)
        outcome = self._certificate_outcome(request, user, self.clock.now())
        if outcome.passed and next_handler is not None:
            return GuardOutcome(outcome.environment, response=self._run(next_handler, request, outcome.environment))
        return outcome

    def guard_proxy(self, request: Request, next_handler: View | None = None) -> GuardOutcome:
        user = self.user(request)
        if user is None:
            return self._to_login(request)
        now = self.clock.now()
        outcome = self._certificate_outcome(request, user, now)
        if not outcome.passed:
            return outcome
        proxy = self._proxy_file(user)
        minimum = self.config.proxy_min_remaining
        if not (freshness_check(proxy, minimum, now) or self._adopt(request, user, "proxy", (PROXY_NAME,), minimum, now)):
            _, cookies = self._handshake(user)
            params = {
                "vos": ",".join(self.vos_for(user)),
                "credential": os.path.realpath(self.store.pointer(user, "cert")),
                "return": raw_url(request),
            }
            if self.config.proxy_lifetime:
                params["lifetime"] = str(self.config.proxy_lifetime)
            target = add_query(self.config.gateway_url.rstrip("/") + self.config.proxy_path, **params)
            return GuardOutcome(redirect_to=target, cookies=cookies)
        env = dict(outcome.environment, **{self.config.env_names["proxy"]: str(proxy)})
        if next_handler is not None:
            return GuardOutcome(env, response=self._run(next_handler, request, env))
        return GuardOutcome(env)

    def login_required(self, view: View) -> Callable[[Request], Response]:
        def wrapped(request: Request) -> Response:
            if self.user(request) is None:
                return self._to_login(request).to_response()
            return self._run(view, request, {})

        return wrapped

    def certificate_required(self, view: View) -> Callable[[Request], Response]:
        return lambda request: self.guard_certificate(request, view).to_response()

    def gridproxy_required(self, view: View) -> Callable[[Request], Response]:
        return lambda request: self.guard_proxy(request, view).to_response()
