"""Cloud back-end: ingestion, registry, queries, downlink, analytics.

Everything the HTTP API exposes lives here so it can also be driven
in-process by tests and the scenario runner. Ingestion is idempotent and
atomic per batch: one schema-invalid envelope rejects the whole batch,
while envelopes from unregistered devices are dropped with a logged
event (the batch still succeeds). Registry mutations are versioned and
audited as events.
"""

from __future__ import annotations

import time
from typing import Dict, List, Optional, Tuple

from ..model import (
    ActionKind,
    CommandOrigin,
    ControlCommand,
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Severity,
    TariffSchedule,
    capability_from_wire,
    validate_command,
    validate_measurement,
)
from ..wire import WireError, decode_envelope, encode_envelope
from .energy import Timeframe, energy_query
from .maintenance import (
    MaintenanceConfig,
    analyze_maintenance,
    baseline_power_by_day,
    energy_per_cycle_by_day,
)
from .recommend import (
    OccupancyTrack,
    RecommendConfig,
    Recommendation,
    adjust_setpoint,
    reduce_lighting,
    shift_appliance,
)
from .store import CloudStores, RegistryError


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


def measurement_key(m: Measurement) -> str:
    return f"{m.device_id}:{m.seq_epoch}:{m.seq}"


class CloudService:
    def __init__(
        self,
        data_dir: str,
        maintenance_config: MaintenanceConfig = MaintenanceConfig(),
        recommend_config: RecommendConfig = RecommendConfig(),
    ):
        self.stores = CloudStores(data_dir)
        self.maintenance_config = maintenance_config
        self.recommend_config = recommend_config

    def close(self) -> None:
        self.stores.close()

    # --- auth ---------------------------------------------------------------

    def check_token(self, home_id: str, token: Optional[str]) -> None:
        if not self.stores.registry.check_token(home_id, token):
            raise ServiceError(401, "unauthorized", "bad or missing bearer token")

    def provision_home(self, home_id: str, token: str, rooms=(), tariff=None, settings=None) -> None:
        self.stores.registry.provision_home(home_id, token, rooms, tariff, settings)

    # --- ingestion ------------------------------------------------------------

    def ingest_batch(self, home_id: str, raw_batch: List[dict]) -> dict:
        if not isinstance(raw_batch, list):
            raise ServiceError(422, "schema", "ingest body must be an array of envelopes")
        envelopes = []
        for raw in raw_batch:
            try:
                envelope = decode_envelope(raw)
            except WireError as exc:
                raise ServiceError(422, "schema", f"invalid envelope: {exc}") from None
            if isinstance(envelope, Measurement):
                result = validate_measurement(envelope)
                if not result.ok:
                    raise ServiceError(422, "schema", "; ".join(result.violations))
            elif isinstance(envelope, ControlCommand):
                raise ServiceError(422, "schema", "commands do not belong in the ingest stream")
            envelopes.append(envelope)

        accepted_keys: List[str] = []
        accepted_events: List[str] = []
        for envelope in envelopes:
            if isinstance(envelope, Measurement):
                if not self.stores.registry.is_active_device(home_id, envelope.device_id):
                    self._log_unknown_device(home_id, envelope)
                    continue
                self.stores.measurements.insert(envelope)
                accepted_keys.append(measurement_key(envelope))
            else:
                event: Event = envelope
                if not self.stores.events.has(event.event_id) and self.stores.events.regression(event):
                    self._log_regression(event)
                    continue
                self.stores.events.insert(event)
                accepted_events.append(event.event_id)
        return {"accepted": accepted_keys, "accepted_events": accepted_events}

    def _log_unknown_device(self, home_id: str, m: Measurement) -> None:
        self.stores.events.insert(
            Event(
                event_id=f"unknown-device-{m.device_id}-{m.seq_epoch}-{m.seq}",
                kind=EventKind.SYSTEM_ALERT,
                severity=Severity.WARNING,
                source="cloud-ingest",
                timestamp=m.timestamp,
                payload={"code": "unknown_device", "home_id": home_id, "device_id": m.device_id},
            )
        )

    def _log_regression(self, e: Event) -> None:
        self.stores.events.insert(
            Event(
                event_id=f"ts-regression-{e.event_id}",
                kind=EventKind.SYSTEM_ALERT,
                severity=Severity.WARNING,
                source="cloud-ingest",
                timestamp=e.timestamp,
                payload={"code": "timestamp_regression", "event_id": e.event_id, "source": e.source},
            )
        )

    # --- energy queries ----------------------------------------------------------

    def query_energy(
        self,
        home_id: str,
        scope: str,
        timeframe: str,
        from_ms: Optional[int] = None,
        to_ms: Optional[int] = None,
    ) -> List[dict]:
        try:
            tf = Timeframe(timeframe)
        except ValueError:
            raise ServiceError(400, "bad_timeframe", f"unknown timeframe {timeframe!r}") from None
        if from_ms is not None and to_ms is not None and to_ms <= from_ms:
            raise ServiceError(400, "bad_range", "empty time range")
        device_ids = [d["device_id"] for d in self.stores.registry.devices(home_id, include_removed=True)]
        home_scope = scope == home_id
        if not home_scope and scope not in device_ids:
            raise ServiceError(404, "unknown_scope", f"no device {scope} in {home_id}")
        series = {
            device: self.stores.measurements.series(device, MetricKind.ENERGY_WH)
            for device in (device_ids if home_scope else [scope])
        }
        buckets = energy_query(series, scope, tf, from_ms, to_ms, home_scope=home_scope)
        return [b.to_dict() for b in buckets]

    # --- registry ------------------------------------------------------------------

    def list_devices(self, home_id: str, include_latest: bool = True) -> List[dict]:
        devices = self.stores.registry.devices(home_id)
        if include_latest:
            for device in devices:
                latest = self.stores.measurements.latest(device["device_id"])
                device["latest"] = {
                    metric: {"value": m.value, "timestamp": m.timestamp}
                    for metric, m in sorted(latest.items())
                }
        return devices

    def _audit(self, home_id: str, op: str, device_id: str, old, new, timestamp: int) -> None:
        version = (new or old or {}).get("version", 0)
        self.stores.events.insert(
            Event(
                event_id=f"registry-{home_id}-{device_id}-v{version}-{op}",
                kind=EventKind.SYSTEM_ALERT,
                severity=Severity.INFO,
                source="registry",
                timestamp=timestamp,
                payload={"op": op, "device_id": device_id, "old": old, "new": new},
            )
        )

    def add_device(self, home_id: str, entry: dict, timestamp: Optional[int] = None) -> dict:
        timestamp = timestamp if timestamp is not None else int(time.time() * 1000)
        required = {"device_id", "category", "protocol", "capabilities"}
        missing = required - set(entry)
        if missing:
            raise ServiceError(422, "schema", f"device entry missing {sorted(missing)}")
        try:
            stored = self.stores.registry.add_device(home_id, entry, timestamp)
        except RegistryError as exc:
            raise ServiceError(exc.status, exc.code, str(exc)) from None
        self._audit(home_id, "add", entry["device_id"], None, stored, timestamp)
        return stored

    def modify_device(
        self, home_id: str, device_id: str, changes: dict, timestamp: Optional[int] = None
    ) -> dict:
        timestamp = timestamp if timestamp is not None else int(time.time() * 1000)
        try:
            old, new = self.stores.registry.modify_device(home_id, device_id, changes, timestamp)
        except RegistryError as exc:
            raise ServiceError(exc.status, exc.code, str(exc)) from None
        self._audit(home_id, "modify", device_id, old, new, timestamp)
        return new

    def remove_device(self, home_id: str, device_id: str, timestamp: Optional[int] = None) -> dict:
        timestamp = timestamp if timestamp is not None else int(time.time() * 1000)
        try:
            tombstone = self.stores.registry.remove_device(home_id, device_id, timestamp)
        except RegistryError as exc:
            raise ServiceError(exc.status, exc.code, str(exc)) from None
        self._audit(home_id, "remove", device_id, None, tombstone, timestamp)
        return tombstone

    def rooms(self, home_id: str) -> List[str]:
        try:
            return self.stores.registry.rooms(home_id)
        except RegistryError as exc:
            raise ServiceError(exc.status, exc.code, str(exc)) from None

    def add_room(self, home_id: str, room: str) -> List[str]:
        if not room:
            raise ServiceError(422, "schema", "room name must be non-empty")
        self.stores.registry.add_room(home_id, room)
        return self.stores.registry.rooms(home_id)

    # --- events ---------------------------------------------------------------------

    def append_event(self, home_id: str, raw: dict) -> str:
        try:
            envelope = decode_envelope(raw)
        except WireError as exc:
            raise ServiceError(422, "schema", str(exc)) from None
        if not isinstance(envelope, Event):
            raise ServiceError(422, "schema", "events endpoint accepts event envelopes")
        if self.stores.events.has(envelope.event_id):
            raise ServiceError(409, "duplicate_event", f"event {envelope.event_id} already logged")
        if self.stores.events.regression(envelope):
            raise ServiceError(400, "timestamp_regression", "timestamps must be non-decreasing per source")
        self.stores.events.insert(envelope)
        return envelope.event_id

    def query_events(
        self,
        home_id: str,
        from_ms: Optional[int] = None,
        to_ms: Optional[int] = None,
        kind: Optional[str] = None,
        severity: Optional[str] = None,
        source: Optional[str] = None,
        limit: Optional[int] = None,
    ) -> List[dict]:
        try:
            kind_e = EventKind(kind) if kind else None
            severity_e = Severity(severity) if severity else None
        except ValueError as exc:
            raise ServiceError(400, "bad_filter", str(exc)) from None
        events = self.stores.events.query(from_ms, to_ms, kind_e, severity_e, source, limit)
        return [encode_envelope(e) for e in events]

    # --- commands & DR (edge downlink) ------------------------------------------------

    def post_command(
        self,
        home_id: str,
        device_id: str,
        action: str,
        arg: Optional[float] = None,
        origin: str = "user",
        command_id: Optional[str] = None,
        issued_at: Optional[int] = None,
    ) -> dict:
        try:
            action_e = ActionKind(action)
            origin_e = CommandOrigin(origin)
        except ValueError as exc:
            raise ServiceError(422, "schema", str(exc)) from None
        try:
            device = self.stores.registry.device(home_id, device_id)
        except RegistryError as exc:
            raise ServiceError(exc.status, exc.code, str(exc)) from None
        if device.get("removed"):
            raise ServiceError(404, "unknown_device", f"device {device_id} was removed")
        capabilities = frozenset(capability_from_wire(c) for c in device.get("capabilities", ()))
        queue = self.stores.downlink(home_id)
        issued_at = issued_at if issued_at is not None else int(time.time() * 1000)
        command_id = command_id or f"cmd-{home_id}-{issued_at}-{device_id}"
        cmd = ControlCommand(
            command_id=command_id,
            device_id=device_id,
            action=action_e,
            origin=origin_e,
            issued_at=issued_at,
            arg=arg,
        )
        result = validate_command(cmd, capabilities=capabilities)
        if not result.ok:
            raise ServiceError(422, "invalid_command", "; ".join(result.violations))
        queue.append(encode_envelope(cmd))
        self.stores.events.insert(
            Event(
                event_id=f"issued-{command_id}",
                kind=EventKind.COMMAND_ISSUED,
                severity=Severity.INFO,
                source="cloud-api",
                timestamp=issued_at,
                payload={
                    "command_id": command_id,
                    "device_id": device_id,
                    "action": action_e.value,
                    "arg": arg,
                    "origin": origin_e.value,
                },
            )
        )
        return {"command_id": command_id}

    def post_dr_signal(
        self,
        home_id: str,
        signal_id: str,
        target_reduction_w: float,
        window_start: int,
        window_end: int,
    ) -> dict:
        if target_reduction_w <= 0:
            raise ServiceError(422, "schema", "target_reduction_w must be positive")
        if window_end <= window_start:
            raise ServiceError(422, "schema", "empty DR window")
        event = Event(
            event_id=f"dr-{signal_id}",
            kind=EventKind.DR_SIGNAL,
            severity=Severity.WARNING,
            source="cloud-api",
            timestamp=window_start,
            payload={
                "signal_id": signal_id,
                "target_reduction_w": target_reduction_w,
                "window_start": window_start,
                "window_end": window_end,
            },
        )
        if self.stores.events.has(event.event_id):
            raise ServiceError(409, "duplicate_signal", f"signal {signal_id} already posted")
        self.stores.downlink(home_id).append(encode_envelope(event))
        self.stores.events.insert(event)
        return {"signal_id": signal_id}

    def fetch_commands(self, home_id: str, cursor: int, wait_ms: int = 0) -> dict:
        new_cursor, items = self.stores.downlink(home_id).fetch(cursor, wait_ms)
        return {"cursor": new_cursor, "items": items}

    # --- analytics ----------------------------------------------------------------------

    def maintenance(self, home_id: str) -> List[dict]:
        alerts = []
        for device in self.stores.registry.devices(home_id):
            device_id = device["device_id"]
            power = self.stores.measurements.series(device_id, MetricKind.POWER_W)
            energy = self.stores.measurements.series(device_id, MetricKind.ENERGY_WH)
            indicators = (
                ("energy_per_cycle", energy_per_cycle_by_day(power, energy)),
                ("baseline_power", baseline_power_by_day(power)),
            )
            for name, points in indicators:
                alert = analyze_maintenance(device_id, name, points, self.maintenance_config)
                if alert is None:
                    continue
                alerts.append(alert.to_dict())
                self.stores.events.insert(
                    Event(
                        event_id=f"maint-{device_id}-{name}",
                        kind=EventKind.MAINTENANCE_ALERT,
                        severity=Severity.WARNING,
                        source=device_id,
                        timestamp=points[-1][0],
                        payload=alert.to_dict(),
                    )
                )
        return alerts

    def recommendations(self, home_id: str, lookback_days: float = 1.0) -> List[dict]:
        tariff = self.stores.registry.tariff(home_id)
        if tariff is None:
            return []
        devices = self.stores.registry.devices(home_id)
        occupancy_by_room: Dict[str, OccupancyTrack] = {}
        all_occupancy_rows = []
        for device in devices:
            if "occupancy" in device.get("capabilities", ()):
                rows = self.stores.measurements.series(device["device_id"], MetricKind.OCCUPANCY)
                all_occupancy_rows.extend(rows)
                if device.get("room"):
                    occupancy_by_room[device["room"]] = OccupancyTrack(rows)
        all_occupancy_rows.sort(key=lambda m: m.timestamp)
        home_track = OccupancyTrack(all_occupancy_rows)

        recommendations: List[Recommendation] = []
        for device in devices:
            device_id = device["device_id"]
            tags = set(device.get("tags", ()))
            track = occupancy_by_room.get(device.get("room", ""), home_track)
            if device.get("flexible"):
                rec = shift_appliance(
                    device_id,
                    self.stores.measurements.series(device_id, MetricKind.ENERGY_WH),
                    tariff,
                    lookback_days,
                    self.recommend_config,
                )
                if rec:
                    recommendations.append(rec)
            if "heating" in tags:
                rec = adjust_setpoint(
                    device_id,
                    self.stores.measurements.series(device_id, MetricKind.POWER_W),
                    track,
                    tariff,
                    lookback_days,
                    self.recommend_config,
                )
                if rec:
                    recommendations.append(rec)
            if "lighting" in tags:
                rec = reduce_lighting(
                    device_id,
                    self.stores.measurements.series(device_id, MetricKind.POWER_W),
                    track,
                    tariff,
                    lookback_days,
                    self.recommend_config,
                )
                if rec:
                    recommendations.append(rec)

        out = []
        for rec in sorted(recommendations, key=lambda r: r.recommendation_id):
            rec.status = self.stores.rec_status.get(rec.recommendation_id, "proposed")
            out.append(rec.to_dict())
        return out

    def recommendation_action(self, home_id: str, recommendation_id: str, action: str) -> dict:
        if action not in ("apply", "dismiss"):
            raise ServiceError(400, "bad_action", f"unknown action {action!r}")
        candidates = {r["recommendation_id"]: r for r in self.recommendations(home_id, lookback_days=7.0)}
        rec = candidates.get(recommendation_id)
        if rec is None:
            raise ServiceError(404, "unknown_recommendation", f"no recommendation {recommendation_id}")
        status = "applied" if action == "apply" else "dismissed"
        self.stores.rec_status[recommendation_id] = status
        self.stores.save_rec_status()
        if action == "apply" and "proposed_command" in rec:
            self.post_command(
                home_id,
                rec["device_id"],
                rec["proposed_command"]["action"],
                rec["proposed_command"].get("arg"),
                origin="cloud",
                command_id=f"applied-{recommendation_id}",
            )
        rec["status"] = status
        return rec

    # --- settings ----------------------------------------------------------------------

    def get_settings(self, home_id: str) -> dict:
        try:
            return self.stores.registry.settings(home_id)
        except RegistryError as exc:
            raise ServiceError(exc.status, exc.code, str(exc)) from None

    def update_settings(self, home_id: str, changes: dict) -> dict:
        if not isinstance(changes, dict):
            raise ServiceError(422, "schema", "settings body must be an object")
        settings = self.stores.registry.update_settings(home_id, changes)
        self.stores.events.insert(
            Event(
                event_id=f"settings-{home_id}-{int(time.time() * 1000)}",
                kind=EventKind.SYSTEM_ALERT,
                severity=Severity.INFO,
                source="registry",
                timestamp=int(time.time() * 1000),
                payload={"op": "settings", "changes": changes},
            )
        )
        return settings
