"""Route schemes and payload translation, independent of any socket.

The same logical reading travels as:

- MQTT publish on  ``hems/{home}/{device}/tel/{metric}``
- CoAP PUT to      ``/tel/{home}/{device}/{metric}``
- HTTP POST to     ``/ingest/{home}/{device}/{metric}``

all carrying the compact telemetry body
``{"v": 1, "value": ..., "ts": ..., "seq": ..., "seq_epoch": ...}``.
Device events ride the telemetry route with metric segment ``event`` and a
full canonical event envelope as the body. Commands travel the opposite
direction as full canonical command envelopes on:

- MQTT ``hems/{home}/{device}/cmd``
- CoAP POST ``/cmd/{home}/{device}``
- HTTP POST ``/device/{home}/{device}/command``
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

from ..model import (
    ControlCommand,
    Event,
    Measurement,
    MetricKind,
    Protocol,
    validate_command,
    validate_measurement,
)
from ..wire import WireError, canonical_json, decode_envelope, encode_envelope

EVENT_SEGMENT = "event"


class AdapterError(Exception):
    """Base for translation failures; adapters log these, never crash."""


class UnknownDevice(AdapterError):
    pass


class MalformedPayload(AdapterError):
    pass


class EncodeFailure(AdapterError):
    pass


@dataclass(frozen=True)
class ProtocolBinding:
    """Where one device talks and listens."""

    protocol: Protocol
    home_id: str
    device_id: str
    host: str = "127.0.0.1"
    port: int = 0
    token: Optional[str] = None


@dataclass(frozen=True)
class RawFrame:
    """One transport-level message, as received or about to be sent."""

    protocol: Protocol
    route: str
    payload: bytes
    received_at: int = 0


class DeviceRegistry:
    """Known (home, device) pairs; frames from anything else are rejected."""

    def __init__(self) -> None:
        self._devices: Dict[Tuple[str, str], Protocol] = {}

    def register(self, home_id: str, device_id: str, protocol: Protocol) -> None:
        self._devices[(home_id, device_id)] = protocol

    def knows(self, home_id: str, device_id: str) -> bool:
        return (home_id, device_id) in self._devices

    def __len__(self) -> int:
        return len(self._devices)


def telemetry_route(protocol: Protocol, home_id: str, device_id: str, segment: str) -> str:
    if protocol is Protocol.MQTT:
        return f"hems/{home_id}/{device_id}/tel/{segment}"
    if protocol is Protocol.COAP:
        return f"/tel/{home_id}/{device_id}/{segment}"
    return f"/ingest/{home_id}/{device_id}/{segment}"


def command_route(protocol: Protocol, home_id: str, device_id: str) -> str:
    if protocol is Protocol.MQTT:
        return f"hems/{home_id}/{device_id}/cmd"
    if protocol is Protocol.COAP:
        return f"/cmd/{home_id}/{device_id}"
    return f"/device/{home_id}/{device_id}/command"


def _split_route(frame: RawFrame) -> Tuple[str, str, str]:
    """Return (home, device, segment) for a telemetry route of any protocol."""
    route = frame.route
    if frame.protocol is Protocol.MQTT:
        parts = route.split("/")
        if len(parts) == 5 and parts[0] == "hems" and parts[3] == "tel":
            return parts[1], parts[2], parts[4]
    else:
        parts = route.strip("/").split("/")
        expected = "tel" if frame.protocol is Protocol.COAP else "ingest"
        if len(parts) == 4 and parts[0] == expected:
            return parts[1], parts[2], parts[3]
    raise MalformedPayload(f"unrecognized telemetry route {route!r}")


def encode_telemetry(m: Measurement) -> bytes:
    body = {
        "v": 1,
        "value": float(m.value),
        "ts": int(m.timestamp),
        "seq": int(m.seq),
        "seq_epoch": int(m.seq_epoch),
    }
    return canonical_json(body).encode()


def encode_device_event(e: Event) -> bytes:
    return canonical_json(encode_envelope(e)).encode()


_TELEMETRY_FIELDS = {"v", "value", "ts", "seq", "seq_epoch"}


def ingest(frame: RawFrame, registry: Optional[DeviceRegistry] = None) -> Union[Measurement, Event]:
    """Normalize one inbound frame to a canonical Measurement or Event.

    The result is independent of the protocol the frame arrived on.
    Raises UnknownDevice for unregistered routes and MalformedPayload for
    anything that does not parse or validate.
    """
    home_id, device_id, segment = _split_route(frame)
    if registry is not None and not registry.knows(home_id, device_id):
        raise UnknownDevice(f"no registered device {home_id}/{device_id}")

    try:
        data = json.loads(frame.payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedPayload(f"{device_id}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise MalformedPayload(f"{device_id}: payload must be an object")

    if segment == EVENT_SEGMENT:
        try:
            envelope = decode_envelope(data)
        except WireError as exc:
            raise MalformedPayload(f"{device_id}: {exc}") from None
        if not isinstance(envelope, Event):
            raise MalformedPayload(f"{device_id}: event route carried {type(envelope).__name__}")
        return envelope

    try:
        metric = MetricKind(segment)
    except ValueError:
        raise MalformedPayload(f"{device_id}: unknown metric segment {segment!r}") from None
    if data.get("v") != 1:
        raise MalformedPayload(f"{device_id}: unsupported telemetry version {data.get('v')!r}")
    extra = set(data) - _TELEMETRY_FIELDS
    if extra:
        raise MalformedPayload(f"{device_id}: unknown fields {sorted(extra)}")
    try:
        value = data["value"]
        ts = data["ts"]
        seq = data["seq"]
        epoch = data.get("seq_epoch", 0)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("value must be a number")
        if not isinstance(ts, int) or not isinstance(seq, int) or not isinstance(epoch, int):
            raise TypeError("ts/seq/seq_epoch must be integers")
    except (KeyError, TypeError) as exc:
        raise MalformedPayload(f"{device_id}: {exc}") from None

    measurement = Measurement(
        device_id=device_id,
        metric=metric,
        value=float(value),
        timestamp=ts,
        seq=seq,
        seq_epoch=epoch,
    )
    result = validate_measurement(measurement)
    if not result.ok:
        raise MalformedPayload(f"{device_id}: {'; '.join(result.violations)}")
    return measurement


def emit_command(cmd: ControlCommand, binding: ProtocolBinding) -> RawFrame:
    """Encode a command as a protocol-correct frame for the bound device."""
    if cmd.device_id != binding.device_id:
        raise EncodeFailure(f"command for {cmd.device_id} given binding of {binding.device_id}")
    result = validate_command(cmd)
    if not result.ok:
        raise EncodeFailure("; ".join(result.violations))
    return RawFrame(
        protocol=binding.protocol,
        route=command_route(binding.protocol, binding.home_id, binding.device_id),
        payload=canonical_json(encode_envelope(cmd)).encode(),
        received_at=cmd.issued_at,
    )


def decode_command_frame(frame: RawFrame) -> ControlCommand:
    """Device-side inverse of :func:`emit_command`."""
    try:
        envelope = decode_envelope(json.loads(frame.payload))
    except (json.JSONDecodeError, UnicodeDecodeError, WireError) as exc:
        raise MalformedPayload(f"bad command frame: {exc}") from None
    if not isinstance(envelope, ControlCommand):
        raise MalformedPayload(f"command route carried {type(envelope).__name__}")
    return envelope
