"""HTTP legs of the protocol bridge.

Telemetry: devices POST ``/ingest/{home}/{device}/{metric}`` to the
gateway's listener with a per-home bearer token. Commands: the gateway
POSTs the canonical command envelope to the device's own little listener
at ``/device/{home}/{device}/command``; one listener serves every HTTP
device in a fleet process.
"""

from __future__ import annotations

import time
from typing import Callable, Optional

from ..httpd import JsonHttpServer, Request, error_body
from ..model import Protocol
from .codec import RawFrame


class HttpIngestListener:
    """Gateway-side listener; ``sink`` is called before the 200 goes out."""

    def __init__(
        self,
        host: str,
        port: int,
        sink: Callable[[RawFrame], Optional[str]],
        check_token: Callable[[str, Optional[str]], bool],
    ):
        self.server = JsonHttpServer(host, port, name="http-ingest")
        self._sink = sink
        self._check_token = check_token
        self.server.route(
            "POST", r"/ingest/(?P<home>[^/]+)/(?P<device>[^/]+)/(?P<metric>[^/]+)", self._ingest,
            json_body=False,
        )

    @property
    def port(self) -> int:
        return self.server.port

    def start(self) -> None:
        self.server.start()

    def stop(self) -> None:
        self.server.stop()

    def _ingest(self, request: Request):
        home = request.match.group("home")
        if not self._check_token(home, request.bearer_token()):
            return 401, error_body("unauthorized", "bad or missing bearer token")
        frame = RawFrame(
            protocol=Protocol.HTTP,
            route=f"/ingest/{home}/{request.match.group('device')}/{request.match.group('metric')}",
            payload=request.raw_body,
            received_at=int(time.time() * 1000),
        )
        problem = self._sink(frame)
        if problem == "unknown_device":
            return 404, error_body("unknown_device", "device not registered")
        if problem is not None:
            return 400, error_body("malformed", problem)
        return 200, {"ok": True}


class DeviceCommandServer:
    """Fleet-side listener receiving command envelopes for HTTP devices."""

    def __init__(self, host: str, port: int, dispatch: Callable[[str, str, bytes], bool]):
        self.server = JsonHttpServer(host, port, name="device-cmd")
        self._dispatch = dispatch
        self.server.route(
            "POST", r"/device/(?P<home>[^/]+)/(?P<device>[^/]+)/command", self._command,
            json_body=False,
        )

    @property
    def port(self) -> int:
        return self.server.port

    def start(self) -> None:
        self.server.start()

    def stop(self) -> None:
        self.server.stop()

    def _command(self, request: Request):
        home = request.match.group("home")
        device = request.match.group("device")
        if not self._dispatch(home, device, request.raw_body):
            return 404, error_body("unknown_device", f"no device {device} here")
        return 200, {"ok": True}
