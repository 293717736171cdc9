"""Simulated single sign-on: identity provider, service provider, assertion renewal.

The renewal choreography is a chain of GET redirects that swaps a stale
assertion in the SP session cache for a fresh one without user input, as long
as the IdP session is still alive:

    protected page -> SP logout -> renew/<encoded page> -> IdP -> renew/<...>?assertion=
                   -> original page

:meth:`SsoSimulator.renew_assertion_flow` executes that state machine directly
against the in-memory caches; :class:`IdentityProvider` and :class:`SpFrontend`
expose the same transitions over HTTP for a scripted browser.
"""

from __future__ import annotations

import re
import secrets
import threading
import types
from dataclasses import dataclass, field
from typing import Iterable, Mapping
from urllib.parse import quote, unquote, urlencode, urlsplit

import httpx
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from werkzeug.routing import Map, Rule
from werkzeug.wrappers import Request, Response
from werkzeug.utils import redirect

from .clock import SystemClock
from .errors import (
    ExpiredAssertion,
    InvalidAssertion,
    MalformedReturnUrl,
    NoSuchSession,
    SessionExpired,
    UnknownUser,
    UrlTooLong,
)
from .model import (
    DEFAULT_ASSERTION_VALIDITY,
    DEFAULT_CLOCK_SKEW,
    DEFAULT_SESSION_VALIDITY,
    Assertion,
    b64d,
    b64e,
)
from .web import WsgiService, json_response, raise_for_error

IDP_COOKIE = "idp-session"
SP_COOKIE = "sp-session"
ASSERTION_PARAM = "assertion"
DEFAULT_URL_LIMIT = 2000
DEFAULT_COOKIE_WHITELIST = frozenset({IDP_COOKIE, "gcl-location", "gcl-secret"})
INTERACTIVE_HEADER = "X-Interactive"
ERROR_HEADER = "X-Error"


@dataclass(frozen=True)
class IdpSession:
    session_id: str
    user_id: str
    created_at: int
    validity: int = DEFAULT_SESSION_VALIDITY

    def active(self, now: int) -> bool:
        return now <= self.created_at + self.validity


@dataclass(frozen=True)
class SpSession:
    """SP-side session. The cached assertion can expire long before the session."""

    session_id: str
    assertion: Assertion
    created_at: int
    validity: int = DEFAULT_SESSION_VALIDITY
    # The simulated browser's IdP cookie, so the pure state machine can re-auth.
    idp_session_id: str | None = None

    def active(self, now: int) -> bool:
        return now <= self.created_at + self.validity


@dataclass(frozen=True)
class RedirectStep:
    """One browser hop. There is deliberately no request body: GET only."""

    url: str
    cookies: Mapping[str, str] = field(default_factory=dict)
    method: str = "GET"
    stage: str = ""
    interactive: bool = False

    def __post_init__(self):
        if self.method != "GET":
            raise ValueError("redirect steps cannot carry a request body; only GET is supported")
        object.__setattr__(self, "cookies", types.MappingProxyType(dict(self.cookies)))


# --------------------------------------------------------------------------
# Return-address encoding

_ENCODED_SEGMENT = re.compile(r"^(?:[A-Za-z0-9_.~-]|%[0-9A-Fa-f]{2})+$")


def encode_return_url(base: str, original_url: str, limit: int = DEFAULT_URL_LIMIT) -> str:
    """Append ``original_url`` to ``base`` as one percent-encoded path segment."""
    if len(original_url) > limit:
        raise UrlTooLong(f"return URL has {len(original_url)} characters, limit is {limit}")
    parts = urlsplit(original_url)
    if not parts.scheme or not parts.netloc:
        raise MalformedReturnUrl(f"return URL must be absolute: {original_url!r}")
    return base.rstrip("/") + "/" + quote(original_url, safe="")


def decode_return_url(path: str) -> str:
    segment = urlsplit(path).path.rsplit("/", 1)[-1]
    if not segment or not _ENCODED_SEGMENT.match(segment):
        raise MalformedReturnUrl(f"no encoded return address in {path!r}")
    try:
        url = unquote(segment, errors="strict")
    except UnicodeDecodeError as exc:
        raise MalformedReturnUrl(str(exc)) from None
    parts = urlsplit(url)
    if not parts.scheme or not parts.netloc:
        raise MalformedReturnUrl(f"decoded return address is not absolute: {url!r}")
    return url


def add_query(url: str, **params: str) -> str:
    sep = "&" if urlsplit(url).query else "?"
    return url + sep + urlencode(params)


# --------------------------------------------------------------------------
# Identity provider


class IdentityProvider(WsgiService):
    """Auto-authenticating IdP: no passwords, just a registry of known users."""

    def __init__(
        self,
        entity_id: str = "https://idp.simfed.example/idp",
        users: Mapping[str, Mapping[str, str]] | Iterable[str] = (),
        clock=None,
        assertion_validity: int = DEFAULT_ASSERTION_VALIDITY,
        session_validity: int = DEFAULT_SESSION_VALIDITY,
        key: Ed25519PrivateKey | None = None,
    ):
        self.entity_id = entity_id
        self.clock = clock or SystemClock()
        self.assertion_validity = assertion_validity
        self.session_validity = session_validity
        self._key = key or Ed25519PrivateKey.generate()
        self._users: dict[str, dict[str, str]] = {}
        self._sessions: dict[str, IdpSession] = {}
        self._lock = threading.Lock()
        if isinstance(users, Mapping):
            for user, attrs in users.items():
                self.register(user, attrs)
        else:
            for user in users:
                self.register(user)
        self.url_map = Map(
            [
                Rule("/idp/login", endpoint="login", methods=["GET"]),
                Rule("/idp/assert", endpoint="assert", methods=["GET"]),
                Rule("/idp/ecp", endpoint="ecp", methods=["GET"]),
            ]
        )

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()

    def register(self, user_id: str, attributes: Mapping[str, str] | None = None) -> None:
        with self._lock:
            self._users[user_id] = dict(attributes or {"homeOrganization": "simfed.example"})

    def login(self, user_id: str, now: int | None = None) -> IdpSession:
        now = self.clock.now() if now is None else now
        with self._lock:
            if user_id not in self._users:
                raise UnknownUser(user_id)
            session = IdpSession(secrets.token_urlsafe(24), user_id, now, self.session_validity)
            self._sessions[session.session_id] = session
        return session

    def session(self, session_id: str | None) -> IdpSession | None:
        if not session_id:
            return None
        with self._lock:
            return self._sessions.get(session_id)

    def issue_assertion(self, session: IdpSession, now: int | None = None) -> Assertion:
        now = self.clock.now() if now is None else now
        if not session.active(now):
            raise SessionExpired(f"IdP session for {session.user_id} expired")
        with self._lock:
            attributes = dict(self._users.get(session.user_id, {}))
        return Assertion(
            subject=session.user_id,
            issuer=self.entity_id,
            issued_at=now,
            validity=self.assertion_validity,
            attributes=attributes,
        ).signed(self._key)

    # -- HTTP -------------------------------------------------------------

    def on_login(self, request: Request) -> Response:
        # Stands in for the interactive login form being filled in.
        user = request.args.get("user", "")
        try:
            session = self.login(user)
        except UnknownUser:
            resp = Response(f"unknown user {user}\n", status=403)
            resp.headers[ERROR_HEADER] = UnknownUser.code
            return resp
        target = request.args.get("return")
        if target:
            resp = redirect(add_query(request.host_url.rstrip("/") + "/idp/assert", **{"return": target}), 302)
        else:
            resp = Response("logged in\n")
        resp.headers[INTERACTIVE_HEADER] = "login"
        resp.set_cookie(IDP_COOKIE, session.session_id, path="/", httponly=True)
        return resp

    def on_assert(self, request: Request) -> Response:
        target = request.args.get("return")
        if not target:
            return Response("missing return address\n", status=400)
        session = self.session(request.cookies.get(IDP_COOKIE))
        now = self.clock.now()
        if session is None or not session.active(now):
            resp = Response("login required\n", status=401)
            resp.headers[INTERACTIVE_HEADER] = "login"
            resp.headers[ERROR_HEADER] = SessionExpired.code
            return resp
        assertion = self.issue_assertion(session, now)
        return redirect(add_query(target, **{ASSERTION_PARAM: b64e(assertion.to_json().encode())}), 302)

    def on_ecp(self, request: Request) -> Response:
        # Non-browser profile for command-line clients.
        try:
            session = self.login(request.args.get("user", ""))
        except UnknownUser as exc:
            return json_response({"error": exc.code, "detail": str(exc)}, 403)
        return json_response(self.issue_assertion(session).to_dict())


def ecp_assertion(idp_url: str, user: str, http: httpx.Client | None = None) -> Assertion:
    """Fetch a fresh assertion through the IdP's non-browser profile."""
    client = http or httpx.Client(timeout=30.0)
    try:
        response = client.get(add_query(idp_url.rstrip("/") + "/idp/ecp", user=user))
    finally:
        if http is None:
            client.close()
    raise_for_error(response)
    return Assertion.from_dict(response.json())


# --------------------------------------------------------------------------
# Service provider


class ServiceProvider:
    """SP session cache keyed by session id."""

    def __init__(
        self,
        idp_keys: Mapping[str, Ed25519PublicKey],
        clock=None,
        session_validity: int = DEFAULT_SESSION_VALIDITY,
        skew: int = DEFAULT_CLOCK_SKEW,
        cookie_whitelist: Iterable[str] = DEFAULT_COOKIE_WHITELIST,
    ):
        self.idp_keys = dict(idp_keys)
        self.clock = clock or SystemClock()
        self.session_validity = session_validity
        self.skew = skew
        self.cookie_whitelist = frozenset(cookie_whitelist)
        self._sessions: dict[str, SpSession] = {}
        self._lock = threading.Lock()

    def verify(self, assertion: Assertion, now: int) -> None:
        key = self.idp_keys.get(assertion.issuer)
        if key is None or not assertion.verify(key):
            raise InvalidAssertion(f"untrusted or bad signature from {assertion.issuer}")
        if assertion.issued_at > now + self.skew:
            raise InvalidAssertion("assertion issued in the future")
        if now > assertion.expires_at + self.skew:
            raise ExpiredAssertion(f"assertion for {assertion.subject} expired at {assertion.expires_at}")

    def accept_assertion(
        self, assertion: Assertion, now: int | None = None, idp_session_id: str | None = None
    ) -> SpSession:
        now = self.clock.now() if now is None else now
        self.verify(assertion, now)
        session = SpSession(secrets.token_urlsafe(24), assertion, now, self.session_validity, idp_session_id)
        with self._lock:
            self._sessions[session.session_id] = session
        return session

    def session(self, session_id: str | None, now: int | None = None) -> SpSession | None:
        if not session_id:
            return None
        now = self.clock.now() if now is None else now
        with self._lock:
            session = self._sessions.get(session_id)
            if session is not None and not session.active(now):
                del self._sessions[session_id]
                session = None
        return session

    def __contains__(self, session_id: str) -> bool:
        with self._lock:
            return session_id in self._sessions

    def logout(self, session_id: str, return_url: str) -> RedirectStep:
        with self._lock:
            if self._sessions.pop(session_id, None) is None:
                raise NoSuchSession(session_id)
        return RedirectStep(return_url, stage="renew")

    def surviving_cookies(self, cookies: Mapping[str, str]) -> dict[str, str]:
        """Cookies still held by the browser after the logout hop."""
        return {k: v for k, v in cookies.items() if k in self.cookie_whitelist and k != SP_COOKIE}


# --------------------------------------------------------------------------
# Renewal state machine


class SsoSimulator:
    """An IdP and an SP wired together, plus the URLs of the renewal chain."""

    def __init__(
        self,
        idp: IdentityProvider,
        sp: ServiceProvider,
        sp_base: str = "https://sp.simfed.example",
        idp_base: str = "https://idp.simfed.example",
        renew_path: str = "/gcl/renew",
        logout_path: str = "/sp/logout",
        assert_path: str = "/idp/assert",
        url_limit: int = DEFAULT_URL_LIMIT,
    ):
        self.idp = idp
        self.sp = sp
        self.renew_base = sp_base.rstrip("/") + renew_path
        self.logout_url = sp_base.rstrip("/") + logout_path
        self.assert_url = idp_base.rstrip("/") + assert_path
        self.url_limit = url_limit

    def login(self, user_id: str, now: int) -> SpSession:
        """Interactive first login: IdP session, then an SP session from its assertion."""
        idp_session = self.idp.login(user_id, now)
        return self.sp.accept_assertion(self.idp.issue_assertion(idp_session, now), now, idp_session.session_id)

    def renewal_url(self, original_url: str) -> str:
        """First hop of the chain: SP logout with the encoded renew address as return."""
        target = encode_return_url(self.renew_base, original_url, self.url_limit)
        return add_query(self.logout_url, **{"return": target})

    def renew_assertion_flow(
        self,
        sp_session: SpSession,
        original_url: str,
        now: int,
        cookies: Mapping[str, str] | None = None,
    ) -> tuple[SpSession, list[RedirectStep]]:
        jar = dict(cookies or {})
        jar[SP_COOKIE] = sp_session.session_id
        if sp_session.idp_session_id:
            jar[IDP_COOKIE] = sp_session.idp_session_id

        renew_target = encode_return_url(self.renew_base, original_url, self.url_limit)
        steps = [RedirectStep(add_query(self.logout_url, **{"return": renew_target}), jar, stage="logout")]

        hop = self.sp.logout(sp_session.session_id, renew_target)
        jar = self.sp.surviving_cookies(jar)
        steps.append(RedirectStep(hop.url, jar, stage="renew"))

        # The renew page is SP-protected and there is no SP session any more.
        steps.append(RedirectStep(add_query(self.assert_url, **{"return": renew_target}), jar, stage="reauth"))
        idp_session = self.idp.session(jar.get(IDP_COOKIE))
        if idp_session is None or not idp_session.active(now):
            raise SessionExpired("IdP session expired; interactive login required")
        assertion = self.idp.issue_assertion(idp_session, now)
        steps.append(
            RedirectStep(
                add_query(renew_target, **{ASSERTION_PARAM: b64e(assertion.to_json().encode())}),
                jar,
                stage="reauth",
            )
        )

        new_session = self.sp.accept_assertion(assertion, now, idp_session.session_id)
        jar = dict(jar, **{SP_COOKIE: new_session.session_id})
        steps.append(RedirectStep(decode_return_url(renew_target), jar, stage="return"))
        return new_session, steps


def renew_assertion_flow(sim: SsoSimulator, sp_session: SpSession, original_url: str, now: int):
    return sim.renew_assertion_flow(sp_session, original_url, now)


# --------------------------------------------------------------------------
# SP protection layer over HTTP


def raw_url(request: Request) -> str:
    """The request URL exactly as sent, keeping percent-escapes intact."""
    raw = request.environ.get("RAW_URI") or request.environ.get("REQUEST_URI")
    if not raw:
        return request.url
    return request.host_url.rstrip("/") + raw


def raw_path(request: Request) -> str:
    return urlsplit(raw_url(request)).path


class SpFrontend:
    """WSGI middleware playing the web-server SSO module in front of an app.

    It serves the SP logout URL and the RenewAssertion endpoint itself, and
    for protected path prefixes guarantees an SP session (consuming an
    ``assertion`` query parameter coming back from the IdP) before handing
    the request to ``app`` with ``environ["gridcert.sp_session"]`` set.
    """

    def __init__(
        self,
        app,
        sp: ServiceProvider,
        idp_assert_url: str,
        protected: Iterable[str] = (),
        logout_path: str = "/sp/logout",
        renew_path: str = "/gcl/renew",
        url_limit: int = DEFAULT_URL_LIMIT,
    ):
        self.app = app
        self.sp = sp
        self.idp_assert_url = idp_assert_url
        self.protected = tuple(protected) + (renew_path,)
        self.logout_path = logout_path
        self.renew_path = renew_path.rstrip("/")
        self.url_limit = url_limit

    def renewal_url(self, request: Request, original_url: str) -> str:
        base = request.host_url.rstrip("/")
        target = encode_return_url(base + self.renew_path, original_url, self.url_limit)
        return add_query(base + self.logout_path, **{"return": target})

    def __call__(self, environ, start_response):
        request = Request(environ)
        response = self.handle(request)
        return response(environ, start_response)

    def handle(self, request: Request) -> Response:
        path = raw_path(request)
        if path == self.logout_path:
            return self._logout(request)
        if not any(path == p or path.startswith(p.rstrip("/") + "/") for p in self.protected):
            return self._pass(request, None)

        if request.method != "GET":
            # The renewal chain cannot replay a request body.
            return Response("SP-protected endpoints accept GET only\n", status=405)

        now = self.sp.clock.now()
        new_cookie = None
        session = self.sp.session(request.cookies.get(SP_COOKIE), now)
        incoming = request.args.get(ASSERTION_PARAM)
        if incoming:
            try:
                assertion = Assertion.from_json(b64d(incoming))
                session = self.sp.accept_assertion(assertion, now, request.cookies.get(IDP_COOKIE))
                new_cookie = session.session_id
            except (InvalidAssertion, ExpiredAssertion, ValueError, KeyError) as exc:
                return Response(f"assertion rejected: {exc}\n", status=403)
        if session is None:
            return redirect(add_query(self.idp_assert_url, **{"return": raw_url(request)}), 302)

        if path.startswith(self.renew_path + "/"):
            response = self._renew_return(request)
        else:
            response = self._pass(request, session)
        if new_cookie:
            response.set_cookie(SP_COOKIE, new_cookie, path="/", httponly=True)
        return response

    def _pass(self, request: Request, session: SpSession | None) -> Response:
        request.environ["gridcert.sp_session"] = session
        request.environ["gridcert.sp_frontend"] = self
        return Response.from_app(self.app, request.environ)

    def _logout(self, request: Request) -> Response:
        target = request.args.get("return")
        if not target:
            return Response("missing return address\n", status=400)
        session_id = request.cookies.get(SP_COOKIE, "")
        try:
            self.sp.logout(session_id, target)
        except NoSuchSession:
            pass  # logging out without a session still lands on the return address
        response = redirect(target, 302)
        for name in request.cookies:
            if name == SP_COOKIE or name not in self.sp.cookie_whitelist:
                response.delete_cookie(name, path="/")
        return response

    def _renew_return(self, request: Request) -> Response:
        try:
            original = decode_return_url(raw_path(request))
        except MalformedReturnUrl as exc:
            return Response(f"{exc}\n", status=400)
        return redirect(original, 302)
