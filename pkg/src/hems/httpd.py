"""Small JSON-over-HTTP server helper shared by the adapters and the cloud.

A routing table of (method, compiled path regex, handler) on top of the
stdlib ThreadingHTTPServer: hermetic, easy to start and stop mid-test,
no framework dependency. Handlers get the regex match, parsed query,
decoded JSON body, and headers; they return (status, payload).
"""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, List, Optional, Tuple
from urllib.parse import parse_qs, urlparse

logger = logging.getLogger(__name__)

Handler = Callable[["Request"], Tuple[int, object]]


class Request:
    def __init__(self, match, query, body, headers, raw_body: bytes):
        self.match = match
        self.query = query
        self.body = body
        self.headers = headers
        self.raw_body = raw_body

    def bearer_token(self) -> Optional[str]:
        auth = self.headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            return auth[len("Bearer ") :]
        return None

    def param(self, name: str, default: Optional[str] = None) -> Optional[str]:
        values = self.query.get(name)
        return values[0] if values else default


def error_body(code: str, message: str) -> dict:
    return {"code": code, "message": message}


class JsonHttpServer:
    """Route table → threaded HTTP server. Bodies in and out are JSON."""

    def __init__(self, host: str, port: int, name: str = "http"):
        self.routes: List[Tuple[str, re.Pattern, Handler, bool]] = []
        self.name = name
        self._host = host
        self._requested_port = port
        self._httpd: Optional[ThreadingHTTPServer] = None
        self._thread: Optional[threading.Thread] = None
        self._stopping = False

    def route(self, method: str, pattern: str, handler: Handler, json_body: bool = True) -> None:
        self.routes.append((method, re.compile(f"^{pattern}$"), handler, json_body))

    @property
    def port(self) -> int:
        return self._httpd.server_address[1] if self._httpd else self._requested_port

    def start(self) -> None:
        routes = self.routes
        name = self.name
        server = self

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # route access logs to logging, not stderr
                logger.debug("%s: %s", name, fmt % args)

            def _dispatch(self, method: str) -> None:
                parsed = urlparse(self.path)
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                if server._stopping:
                    # a stopped server must shed its keep-alive connections so
                    # clients reconnect to whatever replaced it on this port
                    self._reply(503, error_body("stopping", "server is shutting down"))
                    return
                for route_method, pattern, handler, json_body in routes:
                    if route_method != method:
                        continue
                    match = pattern.match(parsed.path)
                    if not match:
                        continue
                    body = None
                    if json_body and raw:
                        try:
                            body = json.loads(raw)
                        except json.JSONDecodeError as exc:
                            self._reply(400, error_body("bad_json", str(exc)))
                            return
                    request = Request(match, parse_qs(parsed.query), body, self.headers, raw)
                    try:
                        status, payload = handler(request)
                    except Exception:  # noqa: BLE001 - a handler bug must not kill the server
                        logger.exception("%s: handler failed for %s %s", name, method, parsed.path)
                        status, payload = 500, error_body("internal", "internal error")
                    self._reply(status, payload)
                    return
                self._reply(404, error_body("not_found", f"no route for {method} {parsed.path}"))

            def _reply(self, status: int, payload) -> None:
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                if status >= 500 or server._stopping:
                    self.close_connection = True
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                if self.close_connection:
                    self.send_header("Connection", "close")
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def do_PUT(self):
                self._dispatch("PUT")

            def do_DELETE(self):
                self._dispatch("DELETE")

        self._httpd = ThreadingHTTPServer((self._host, self._requested_port), _Handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.05}, name=self.name, daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._stopping = True
        if self._httpd:
            self._httpd.shutdown()
            self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=2)
        self._httpd = None
        self._thread = None
