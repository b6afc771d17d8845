"""Canonical wire envelope: the one record format spoken gateway<->cloud.

A v=1 envelope is a JSON object with ``v``, ``kind`` and the flat fields of
the carried type. Decoding is strict: wrong version, missing fields,
unknown fields, or wrong primitive types are all rejected, so schema
drift fails loudly at the boundary instead of corrupting stores.
"""

from __future__ import annotations

import json
from typing import Union

from .model import (
    ActionKind,
    CommandOrigin,
    ControlCommand,
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Severity,
)

__all__ = [
    "WireError",
    "Envelope",
    "encode_envelope",
    "decode_envelope",
    "dumps_envelope",
    "loads_envelope",
    "canonical_json",
]

SCHEMA_VERSION = 1

Envelope = Union[Measurement, ControlCommand, Event]


class WireError(ValueError):
    """Raised when an envelope violates the v=1 schema."""


_MEASUREMENT_FIELDS = {"v", "kind", "device_id", "metric", "value", "timestamp", "seq", "seq_epoch"}
_COMMAND_FIELDS = {"v", "kind", "command_id", "device_id", "action", "arg", "origin", "issued_at"}
_EVENT_FIELDS = {"v", "kind", "event_id", "event_kind", "severity", "source", "timestamp", "payload"}


def encode_envelope(obj: Envelope) -> dict:
    if isinstance(obj, Measurement):
        return {
            "v": SCHEMA_VERSION,
            "kind": "measurement",
            "device_id": obj.device_id,
            "metric": obj.metric.value,
            "value": float(obj.value),
            "timestamp": int(obj.timestamp),
            "seq": int(obj.seq),
            "seq_epoch": int(obj.seq_epoch),
        }
    if isinstance(obj, ControlCommand):
        return {
            "v": SCHEMA_VERSION,
            "kind": "command",
            "command_id": obj.command_id,
            "device_id": obj.device_id,
            "action": obj.action.value,
            "arg": None if obj.arg is None else float(obj.arg),
            "origin": obj.origin.value,
            "issued_at": int(obj.issued_at),
        }
    if isinstance(obj, Event):
        return {
            "v": SCHEMA_VERSION,
            "kind": "event",
            "event_id": obj.event_id,
            "event_kind": obj.kind.value,
            "severity": obj.severity.value,
            "source": obj.source,
            "timestamp": int(obj.timestamp),
            "payload": dict(obj.payload),
        }
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _require(data: dict, field: str, types) -> object:
    if field not in data:
        raise WireError(f"missing field {field!r}")
    value = data[field]
    if not isinstance(value, types) or isinstance(value, bool):
        raise WireError(f"field {field!r} has wrong type {type(value).__name__}")
    return value


def decode_envelope(data: dict) -> Envelope:
    if not isinstance(data, dict):
        raise WireError("envelope must be an object")
    if data.get("v") != SCHEMA_VERSION:
        raise WireError(f"unsupported schema version {data.get('v')!r}")
    kind = data.get("kind")
    if kind == "measurement":
        extra = set(data) - _MEASUREMENT_FIELDS
        if extra:
            raise WireError(f"unknown fields {sorted(extra)}")
        try:
            metric = MetricKind(_require(data, "metric", str))
        except ValueError as exc:
            raise WireError(str(exc)) from None
        return Measurement(
            device_id=str(_require(data, "device_id", str)),
            metric=metric,
            value=float(_require(data, "value", (int, float))),
            timestamp=int(_require(data, "timestamp", int)),
            seq=int(_require(data, "seq", int)),
            seq_epoch=int(_require(data, "seq_epoch", int)),
        )
    if kind == "command":
        extra = set(data) - _COMMAND_FIELDS
        if extra:
            raise WireError(f"unknown fields {sorted(extra)}")
        arg = data.get("arg")
        if arg is not None and (not isinstance(arg, (int, float)) or isinstance(arg, bool)):
            raise WireError("field 'arg' must be a number or null")
        try:
            action = ActionKind(_require(data, "action", str))
            origin = CommandOrigin(_require(data, "origin", str))
        except ValueError as exc:
            raise WireError(str(exc)) from None
        return ControlCommand(
            command_id=str(_require(data, "command_id", str)),
            device_id=str(_require(data, "device_id", str)),
            action=action,
            arg=None if arg is None else float(arg),
            origin=origin,
            issued_at=int(_require(data, "issued_at", int)),
        )
    if kind == "event":
        extra = set(data) - _EVENT_FIELDS
        if extra:
            raise WireError(f"unknown fields {sorted(extra)}")
        payload = _require(data, "payload", dict)
        try:
            event_kind = EventKind(_require(data, "event_kind", str))
            severity = Severity(_require(data, "severity", str))
        except ValueError as exc:
            raise WireError(str(exc)) from None
        return Event(
            event_id=str(_require(data, "event_id", str)),
            kind=event_kind,
            severity=severity,
            source=str(_require(data, "source", str)),
            timestamp=int(_require(data, "timestamp", int)),
            payload=payload,
        )
    raise WireError(f"unknown envelope kind {kind!r}")


def canonical_json(data) -> str:
    """Deterministic JSON: sorted keys, compact separators."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dumps_envelope(obj: Envelope) -> str:
    return canonical_json(encode_envelope(obj))


def loads_envelope(text: Union[str, bytes]) -> Envelope:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WireError(f"invalid JSON: {exc}") from None
    return decode_envelope(data)
