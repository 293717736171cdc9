"""Loopback HTTP plumbing shared by the simulated services.

Each simulator is a small werkzeug WSGI application; :class:`ServiceThread`
serves one on an ephemeral 127.0.0.1 port from a daemon thread.
"""

from __future__ import annotations

import json
import logging
import threading

import httpx

from werkzeug.exceptions import HTTPException, MethodNotAllowed, NotFound
from werkzeug.routing import Map
from werkzeug.serving import WSGIRequestHandler, make_server
from werkzeug.wrappers import Request, Response

from .errors import GridCertError, ServiceError, error_for_code

log = logging.getLogger(__name__)


class _QuietHandler(WSGIRequestHandler):
    def log_request(self, code="-", size="-"):
        log.debug("%s %s %s", self.command, self.path, code)

    def log_error(self, format, *args):
        log.debug(format, *args)


class WsgiService:
    """Dispatch on a werkzeug ``Map``; endpoint ``foo`` calls ``self.on_foo``."""

    url_map: Map

    def dispatch(self, request: Request) -> Response:
        adapter = self.url_map.bind_to_environ(request.environ)
        try:
            endpoint, values = adapter.match()
            return getattr(self, f"on_{endpoint}")(request, **values)
        except (NotFound, MethodNotAllowed) as exc:
            return exc.get_response(request.environ)
        except HTTPException as exc:
            return exc.get_response(request.environ)

    def __call__(self, environ, start_response):
        request = Request(environ)
        response = self.dispatch(request)
        return response(environ, start_response)


def json_response(data, status: int = 200) -> Response:
    return Response(json.dumps(data, sort_keys=True), status=status, mimetype="application/json")


def error_response(exc: GridCertError, status: int) -> Response:
    return json_response({"error": exc.code, "detail": str(exc)}, status=status)


def raise_for_error(response: httpx.Response) -> None:
    if response.status_code == 200:
        return
    try:
        body = response.json()
        code, detail = body["error"], body.get("detail", "")
    except (ValueError, KeyError, TypeError):
        raise ServiceError(f"HTTP {response.status_code}: {response.text[:200]}") from None
    raise error_for_code(code, detail)


class ServiceThread:
    """Run a WSGI app on a loopback port until :meth:`stop`.

    >>> with ServiceThread(app) as svc:   # doctest: +SKIP
    ...     httpx.get(svc.url + "/ping")
    """

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0, name: str | None = None):
        self.app = app
        self.name = name or type(app).__name__
        self._server = make_server(host, port, app, threaded=True, request_handler=_QuietHandler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._server.server_port

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "ServiceThread":
        self._thread = threading.Thread(target=self._server.serve_forever, name=self.name, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "ServiceThread":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
