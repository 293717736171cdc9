"""A scripted browser: follows redirects by hand and records every hop."""

from __future__ import annotations

from dataclasses import dataclass
from urllib.parse import urljoin

import httpx

from .errors import SessionExpired
from .sso import ERROR_HEADER, INTERACTIVE_HEADER, add_query

REDIRECT_CODES = frozenset({301, 302, 303, 307, 308})


@dataclass(frozen=True)
class Hop:
    url: str
    status: int
    location: str | None = None
    interactive: bool = False


class TooManyRedirects(RuntimeError):
    pass


class ScriptedBrowser:
    """Cookie-keeping GET-only client.

    ``interactive_allowed`` decides what happens when a response asks for a
    human (the IdP login page): if False, :class:`SessionExpired` is raised.
    """

    def __init__(self, max_hops: int = 30, interactive_allowed: bool = False, timeout: float = 30.0):
        self.client = httpx.Client(follow_redirects=False, timeout=timeout)
        self.max_hops = max_hops
        self.interactive_allowed = interactive_allowed
        self.trace: list[Hop] = []

    def close(self) -> None:
        self.client.close()

    def __enter__(self) -> "ScriptedBrowser":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def cookies(self) -> dict[str, str]:
        return {c.name: c.value for c in self.client.cookies.jar}

    def get(self, url: str) -> httpx.Response:
        """GET ``url`` and follow redirects; returns the final response."""
        for _ in range(self.max_hops):
            response = self.client.get(url)
            interactive = INTERACTIVE_HEADER in response.headers
            location = response.headers.get("location")
            target = urljoin(url, location) if location and response.status_code in REDIRECT_CODES else None
            self.trace.append(Hop(url, response.status_code, target, interactive))
            if interactive and not self.interactive_allowed:
                raise SessionExpired(
                    f"{url} wants an interactive login ({response.headers.get(ERROR_HEADER, 'no detail')})"
                )
            if target is None:
                return response
            url = target
        raise TooManyRedirects(f"gave up after {self.max_hops} hops")

    def login(self, idp_url: str, user: str) -> httpx.Response:
        """The one interactive step: authenticate at the IdP."""
        allowed, self.interactive_allowed = self.interactive_allowed, True
        try:
            return self.get(add_query(idp_url.rstrip("/") + "/idp/login", user=user))
        finally:
            self.interactive_allowed = allowed

    def hops_since(self, mark: int) -> list[Hop]:
        return self.trace[mark:]
