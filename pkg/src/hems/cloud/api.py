"""HTTP API v1: the cloud's public surface, consumed by gateway and UI.

All routes live under ``/api/v1`` behind per-home bearer tokens; errors
carry a machine-readable ``code`` and human ``message``. The ingest
route authenticates by resolving the token to its home.
"""

from __future__ import annotations

import logging
from typing import Optional

from ..httpd import JsonHttpServer, Request, error_body
from .service import CloudService, ServiceError

logger = logging.getLogger(__name__)


class CloudApiServer:
    def __init__(self, service: CloudService, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        self.server = JsonHttpServer(host, port, name="cloud-api")

        def r(method: str, pattern: str, handler) -> None:
            self.server.route(method, pattern, self._wrap(handler))

        r("GET", r"/healthz", self.healthz)
        r("POST", r"/api/v1/ingest", self.ingest)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/energy", self.energy)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/devices", self.devices_list)
        r("POST", r"/api/v1/homes/(?P<home>[^/]+)/devices", self.devices_add)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/devices/(?P<id>[^/]+)", self.device_get)
        r("PUT", r"/api/v1/homes/(?P<home>[^/]+)/devices/(?P<id>[^/]+)", self.device_modify)
        r("DELETE", r"/api/v1/homes/(?P<home>[^/]+)/devices/(?P<id>[^/]+)", self.device_remove)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/rooms", self.rooms_list)
        r("POST", r"/api/v1/homes/(?P<home>[^/]+)/rooms", self.rooms_add)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/events", self.events_query)
        r("POST", r"/api/v1/homes/(?P<home>[^/]+)/events", self.events_append)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/recommendations", self.recommendations)
        r(
            "POST",
            r"/api/v1/homes/(?P<home>[^/]+)/recommendations/(?P<id>[^/]+)/(?P<action>apply|dismiss)",
            self.recommendation_action,
        )
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/maintenance", self.maintenance)
        r("POST", r"/api/v1/homes/(?P<home>[^/]+)/dr-signals", self.dr_signal)
        r("POST", r"/api/v1/homes/(?P<home>[^/]+)/commands", self.command_post)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/commands", self.commands_fetch)
        r("GET", r"/api/v1/homes/(?P<home>[^/]+)/settings", self.settings_get)
        r("PUT", r"/api/v1/homes/(?P<home>[^/]+)/settings", self.settings_put)

    @property
    def port(self) -> int:
        return self.server.port

    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> None:
        self.server.start()

    def stop(self) -> None:
        self.server.stop()

    # --- helpers -----------------------------------------------------------

    def _auth(self, request: Request) -> str:
        home = request.match.group("home")
        self.service.check_token(home, request.bearer_token())
        return home

    @staticmethod
    def _int_param(request: Request, name: str) -> Optional[int]:
        raw = request.param(name)
        if raw is None or raw == "":
            return None
        try:
            return int(raw)
        except ValueError:
            raise ServiceError(400, "bad_param", f"{name} must be an integer") from None

    @staticmethod
    def _wrap(fn):
        def inner(request: Request):
            try:
                return fn(request)
            except ServiceError as exc:
                return exc.status, error_body(exc.code, str(exc))

        return inner

    # --- handlers ------------------------------------------------------------

    def healthz(self, request: Request):
        return 200, {"ok": True}

    def ingest(self, request: Request):
        home = self.service.stores.registry.home_for_token(request.bearer_token())
        if home is None:
            return 401, error_body("unauthorized", "bad or missing bearer token")
        body = request.body if request.body is not None else []
        ack = self.service.ingest_batch(home, body)
        return 200, ack

    def energy(self, request: Request):
        home = self._auth(request)
        scope = request.param("scope", home)
        timeframe = request.param("timeframe", "hourly")
        buckets = self.service.query_energy(
            home, scope, timeframe, self._int_param(request, "from"), self._int_param(request, "to")
        )
        return 200, {"scope": scope, "timeframe": timeframe, "buckets": buckets}

    def devices_list(self, request: Request):
        home = self._auth(request)
        return 200, {"devices": self.service.list_devices(home)}

    def devices_add(self, request: Request):
        home = self._auth(request)
        if not isinstance(request.body, dict):
            return 422, error_body("schema", "device entry must be an object")
        return 201, self.service.add_device(home, request.body)

    def device_get(self, request: Request):
        home = self._auth(request)
        devices = {d["device_id"]: d for d in self.service.list_devices(home)}
        device = devices.get(request.match.group("id"))
        if device is None:
            return 404, error_body("unknown_device", "no such device")
        return 200, device

    def device_modify(self, request: Request):
        home = self._auth(request)
        if not isinstance(request.body, dict):
            return 422, error_body("schema", "changes must be an object")
        return 200, self.service.modify_device(home, request.match.group("id"), request.body)

    def device_remove(self, request: Request):
        home = self._auth(request)
        return 200, self.service.remove_device(home, request.match.group("id"))

    def rooms_list(self, request: Request):
        home = self._auth(request)
        return 200, {"rooms": self.service.rooms(home)}

    def rooms_add(self, request: Request):
        home = self._auth(request)
        room = (request.body or {}).get("room", "")
        return 201, {"rooms": self.service.add_room(home, room)}

    def events_query(self, request: Request):
        home = self._auth(request)
        limit = self._int_param(request, "limit")
        events = self.service.query_events(
            home,
            from_ms=self._int_param(request, "from"),
            to_ms=self._int_param(request, "to"),
            kind=request.param("kind"),
            severity=request.param("severity"),
            source=request.param("source"),
            limit=limit,
        )
        return 200, {"events": events}

    def events_append(self, request: Request):
        home = self._auth(request)
        if not isinstance(request.body, dict):
            return 422, error_body("schema", "event envelope required")
        event_id = self.service.append_event(home, request.body)
        return 201, {"event_id": event_id}

    def recommendations(self, request: Request):
        home = self._auth(request)
        raw = request.param("lookback_days")
        lookback = float(raw) if raw else 7.0
        return 200, {"recommendations": self.service.recommendations(home, lookback)}

    def recommendation_action(self, request: Request):
        home = self._auth(request)
        return 200, self.service.recommendation_action(
            home, request.match.group("id"), request.match.group("action")
        )

    def maintenance(self, request: Request):
        home = self._auth(request)
        return 200, {"alerts": self.service.maintenance(home)}

    def dr_signal(self, request: Request):
        home = self._auth(request)
        body = request.body or {}
        try:
            result = self.service.post_dr_signal(
                home,
                signal_id=str(body["signal_id"]),
                target_reduction_w=float(body["target_reduction_w"]),
                window_start=int(body["window_start"]),
                window_end=int(body["window_end"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            return 422, error_body("schema", f"bad dr-signal body: {exc}")
        return 201, result

    def command_post(self, request: Request):
        home = self._auth(request)
        body = request.body or {}
        if "device_id" not in body or "action" not in body:
            return 422, error_body("schema", "device_id and action are required")
        result = self.service.post_command(
            home,
            device_id=str(body["device_id"]),
            action=str(body["action"]),
            arg=body.get("arg"),
            origin=str(body.get("origin", "user")),
            command_id=body.get("command_id"),
            issued_at=body.get("issued_at"),
        )
        return 201, result

    def commands_fetch(self, request: Request):
        home = self._auth(request)
        cursor = self._int_param(request, "cursor") or 0
        wait_ms = self._int_param(request, "wait_ms") or 0
        return 200, self.service.fetch_commands(home, cursor, min(wait_ms, 5000))

    def settings_get(self, request: Request):
        home = self._auth(request)
        return 200, {"settings": self.service.get_settings(home)}

    def settings_put(self, request: Request):
        home = self._auth(request)
        return 200, {"settings": self.service.update_settings(home, request.body or {})}
