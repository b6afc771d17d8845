"""File-backed stores behind the cloud service.

Three logical stores: the measurement log (append-only JSONL, idempotent
by dedup key), the event log (append-only JSONL, idempotent by event id),
and the registry (devices, rooms, tokens, tariff, per-home settings,
rewritten atomically). A replayed uplink batch therefore leaves every
file byte-identical. Device removal tombstones the entry so historical
rows stay queryable.
"""

from __future__ import annotations

import json
import os
import threading
from typing import Dict, Iterable, List, Optional, Tuple

from ..model import (
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Severity,
    TariffBand,
    TariffSchedule,
    dedup_key,
)
from ..wire import WireError, canonical_json, decode_envelope, encode_envelope


class RegistryError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


class MeasurementLog:
    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._keys = set()
        self._series: Dict[Tuple[str, str], List[Measurement]] = {}
        self._sorted: Dict[Tuple[str, str], bool] = {}
        self.count = 0
        self._load()
        self._fh = open(self.path, "a", encoding="utf-8")

    def _load(self) -> None:
        if not os.path.exists(self.path):
            return
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    m = decode_envelope(json.loads(line))
                except (json.JSONDecodeError, WireError):
                    continue
                if isinstance(m, Measurement):
                    self._index(m)

    def _index(self, m: Measurement) -> None:
        self._keys.add(dedup_key(m))
        key = (m.device_id, m.metric.value)
        self._series.setdefault(key, []).append(m)
        self._sorted[key] = False
        self.count += 1

    def insert(self, m: Measurement) -> bool:
        """Idempotent: returns False (and writes nothing) for a known key."""
        with self._lock:
            if dedup_key(m) in self._keys:
                return False
            self._fh.write(canonical_json(encode_envelope(m)) + "\n")
            self._fh.flush()
            self._index(m)
            return True

    def series(
        self,
        device_id: str,
        metric: MetricKind,
        to_ms: Optional[int] = None,
        from_ms: Optional[int] = None,
    ) -> List[Measurement]:
        key = (device_id, metric.value)
        with self._lock:
            rows = self._series.get(key, [])
            if not self._sorted.get(key, True):
                rows.sort(key=lambda m: (m.timestamp, m.seq_epoch, m.seq))
                self._sorted[key] = True
            out = rows
        if from_ms is not None:
            out = [m for m in out if m.timestamp >= from_ms]
        if to_ms is not None:
            out = [m for m in out if m.timestamp < to_ms]
        return list(out)

    def latest(self, device_id: str) -> Dict[str, Measurement]:
        out = {}
        for metric in MetricKind:
            rows = self.series(device_id, metric)
            if rows:
                out[metric.value] = rows[-1]
        return out

    def device_order(self, device_id: str) -> List[tuple]:
        """(seq_epoch, seq) of stored rows for one device, in arrival order."""
        order = []
        if not os.path.exists(self.path):
            return order
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                try:
                    data = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if data.get("kind") == "measurement" and data.get("device_id") == device_id:
                    order.append((data["seq_epoch"], data["seq"]))
        return order

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class EventLog:
    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._ids = set()
        self._events: List[Event] = []
        self._last_ts_by_source: Dict[str, int] = {}
        self._load()
        self._fh = open(self.path, "a", encoding="utf-8")

    def _load(self) -> None:
        if not os.path.exists(self.path):
            return
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    e = decode_envelope(json.loads(line))
                except (json.JSONDecodeError, WireError):
                    continue
                if isinstance(e, Event):
                    self._index(e)

    def _index(self, e: Event) -> None:
        self._ids.add(e.event_id)
        self._events.append(e)
        last = self._last_ts_by_source.get(e.source)
        self._last_ts_by_source[e.source] = max(last, e.timestamp) if last else e.timestamp

    def insert(self, e: Event) -> bool:
        with self._lock:
            if e.event_id in self._ids:
                return False
            self._fh.write(canonical_json(encode_envelope(e)) + "\n")
            self._fh.flush()
            self._index(e)
            return True

    def regression(self, e: Event) -> bool:
        """True when this event would move a source's clock backwards."""
        with self._lock:
            last = self._last_ts_by_source.get(e.source)
            return last is not None and e.timestamp < last

    def has(self, event_id: str) -> bool:
        with self._lock:
            return event_id in self._ids

    def query(
        self,
        from_ms: Optional[int] = None,
        to_ms: Optional[int] = None,
        kind: Optional[EventKind] = None,
        severity: Optional[Severity] = None,
        source: Optional[str] = None,
        limit: Optional[int] = None,
    ) -> List[Event]:
        with self._lock:
            events = list(self._events)
        if from_ms is not None:
            events = [e for e in events if e.timestamp >= from_ms]
        if to_ms is not None:
            events = [e for e in events if e.timestamp < to_ms]
        if kind is not None:
            events = [e for e in events if e.kind is kind]
        if severity is not None:
            events = [e for e in events if e.severity is severity]
        if source is not None:
            events = [e for e in events if e.source == source]
        events.sort(key=lambda e: (e.timestamp, e.source, e.event_id))
        if limit is not None:
            events = events[-limit:]
        return events

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class Registry:
    """Homes, rooms, devices, tariffs, tokens, and per-home edge settings."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._data: dict = {"homes": {}}
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                self._data = json.load(fh)

    def _save(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self._data, fh, sort_keys=True, indent=1)
        os.replace(tmp, self.path)

    def provision_home(
        self,
        home_id: str,
        token: str,
        rooms: Iterable[str] = (),
        tariff: Optional[TariffSchedule] = None,
        settings: Optional[dict] = None,
    ) -> None:
        with self._lock:
            home = self._data["homes"].setdefault(
                home_id,
                {"token": token, "rooms": [], "devices": {}, "tariff": None, "settings": {}},
            )
            home["token"] = token
            for room in rooms:
                if room not in home["rooms"]:
                    home["rooms"].append(room)
            if tariff is not None:
                home["tariff"] = {
                    "bands": [
                        {"start_hour": b.start_hour, "end_hour": b.end_hour, "price_per_kwh": b.price_per_kwh}
                        for b in tariff.bands
                    ],
                    "peak_windows": [list(w) for w in tariff.peak_windows],
                }
            if settings:
                home["settings"].update(settings)
            self._save()

    def home_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._data["homes"])

    def _home(self, home_id: str) -> dict:
        home = self._data["homes"].get(home_id)
        if home is None:
            raise RegistryError(404, "unknown_home", f"no home {home_id}")
        return home

    def check_token(self, home_id: str, token: Optional[str]) -> bool:
        with self._lock:
            home = self._data["homes"].get(home_id)
            return home is not None and token is not None and home["token"] == token

    def home_for_token(self, token: Optional[str]) -> Optional[str]:
        if token is None:
            return None
        with self._lock:
            for home_id, home in self._data["homes"].items():
                if home["token"] == token:
                    return home_id
        return None

    def rooms(self, home_id: str) -> List[str]:
        with self._lock:
            return list(self._home(home_id)["rooms"])

    def add_room(self, home_id: str, room: str) -> None:
        with self._lock:
            home = self._home(home_id)
            if room not in home["rooms"]:
                home["rooms"].append(room)
                self._save()

    def tariff(self, home_id: str) -> Optional[TariffSchedule]:
        with self._lock:
            raw = self._home(home_id).get("tariff")
        if not raw:
            return None
        return TariffSchedule(
            bands=tuple(
                TariffBand(b["start_hour"], b["end_hour"], b["price_per_kwh"]) for b in raw["bands"]
            ),
            peak_windows=tuple(tuple(w) for w in raw.get("peak_windows", ())),
        )

    def settings(self, home_id: str) -> dict:
        with self._lock:
            return dict(self._home(home_id).get("settings", {}))

    def update_settings(self, home_id: str, changes: dict) -> dict:
        with self._lock:
            home = self._home(home_id)
            home.setdefault("settings", {}).update(changes)
            self._save()
            return dict(home["settings"])

    # --- device CRUD ------------------------------------------------------

    def devices(self, home_id: str, include_removed: bool = False) -> List[dict]:
        with self._lock:
            devices = [dict(d) for d in self._home(home_id)["devices"].values()]
        if not include_removed:
            devices = [d for d in devices if not d.get("removed")]
        return sorted(devices, key=lambda d: d["device_id"])

    def device(self, home_id: str, device_id: str) -> dict:
        with self._lock:
            device = self._home(home_id)["devices"].get(device_id)
            if device is None:
                raise RegistryError(404, "unknown_device", f"no device {device_id}")
            return dict(device)

    def is_active_device(self, home_id: str, device_id: str) -> bool:
        with self._lock:
            home = self._data["homes"].get(home_id)
            if home is None:
                return False
            device = home["devices"].get(device_id)
            return device is not None and not device.get("removed")

    def add_device(self, home_id: str, entry: dict, timestamp: int) -> dict:
        with self._lock:
            home = self._home(home_id)
            device_id = entry["device_id"]
            existing = home["devices"].get(device_id)
            if existing is not None and not existing.get("removed"):
                raise RegistryError(409, "duplicate_device", f"device {device_id} already registered")
            if entry.get("room") and entry["room"] not in home["rooms"]:
                raise RegistryError(422, "unknown_room", f"room {entry['room']!r} does not exist")
            entry = dict(entry)
            entry["version"] = 1 if existing is None else existing["version"] + 1
            entry["updated_at"] = timestamp
            entry["removed"] = False
            home["devices"][device_id] = entry
            self._save()
            return dict(entry)

    def modify_device(self, home_id: str, device_id: str, changes: dict, timestamp: int) -> Tuple[dict, dict]:
        with self._lock:
            home = self._home(home_id)
            device = home["devices"].get(device_id)
            if device is None or device.get("removed"):
                raise RegistryError(404, "unknown_device", f"no device {device_id}")
            if "room" in changes and changes["room"] and changes["room"] not in home["rooms"]:
                raise RegistryError(422, "unknown_room", f"room {changes['room']!r} does not exist")
            old = dict(device)
            for field in ("label", "room", "rank", "curtailable", "flexible", "tags"):
                if field in changes:
                    device[field] = changes[field]
            device["version"] += 1
            device["updated_at"] = timestamp
            self._save()
            return old, dict(device)

    def remove_device(self, home_id: str, device_id: str, timestamp: int) -> dict:
        with self._lock:
            home = self._home(home_id)
            device = home["devices"].get(device_id)
            if device is None or device.get("removed"):
                raise RegistryError(404, "unknown_device", f"no device {device_id}")
            device["removed"] = True
            device["version"] += 1
            device["updated_at"] = timestamp
            self._save()
            return dict(device)


class DownlinkQueue:
    """Per-home log of envelopes destined for the edge, with long-poll."""

    def __init__(self, path: str):
        self.path = path
        self._cond = threading.Condition()
        self._items: List[dict] = []
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                self._items = [json.loads(line) for line in fh if line.strip()]
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, envelope: dict) -> int:
        with self._cond:
            self._fh.write(canonical_json(envelope) + "\n")
            self._fh.flush()
            self._items.append(envelope)
            self._cond.notify_all()
            return len(self._items)

    def fetch(self, cursor: int, wait_ms: int = 0) -> Tuple[int, List[dict]]:
        deadline = wait_ms / 1000.0
        with self._cond:
            if cursor >= len(self._items) and wait_ms > 0:
                self._cond.wait(deadline)
            items = self._items[cursor:]
            return len(self._items), list(items)

    def close(self) -> None:
        with self._cond:
            self._fh.close()


class CloudStores:
    """One data directory holding every store."""

    def __init__(self, data_dir: str):
        os.makedirs(data_dir, exist_ok=True)
        self.data_dir = data_dir
        self.measurements = MeasurementLog(os.path.join(data_dir, "measurements.jsonl"))
        self.events = EventLog(os.path.join(data_dir, "events.jsonl"))
        self.registry = Registry(os.path.join(data_dir, "registry.json"))
        self._downlink_lock = threading.Lock()
        self._downlinks: Dict[str, DownlinkQueue] = {}
        self._rec_path = os.path.join(data_dir, "recommendation_status.json")
        self.rec_status: Dict[str, str] = {}
        if os.path.exists(self._rec_path):
            with open(self._rec_path, "r", encoding="utf-8") as fh:
                self.rec_status = json.load(fh)

    def downlink(self, home_id: str) -> DownlinkQueue:
        with self._downlink_lock:
            if home_id not in self._downlinks:
                self._downlinks[home_id] = DownlinkQueue(
                    os.path.join(self.data_dir, f"downlink-{home_id}.jsonl")
                )
            return self._downlinks[home_id]

    def save_rec_status(self) -> None:
        tmp = self._rec_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.rec_status, fh, sort_keys=True, indent=1)
        os.replace(tmp, self._rec_path)

    def close(self) -> None:
        self.measurements.close()
        self.events.close()
        for queue in self._downlinks.values():
            queue.close()
