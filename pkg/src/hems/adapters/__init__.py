"""Edge-side protocol bridge: MQTT, CoAP, and HTTP to the canonical model."""

from .codec import (
    AdapterError,
    DeviceRegistry,
    EncodeFailure,
    MalformedPayload,
    ProtocolBinding,
    RawFrame,
    UnknownDevice,
    command_route,
    decode_command_frame,
    emit_command,
    encode_telemetry,
    ingest,
    telemetry_route,
)

__all__ = [
    "AdapterError",
    "DeviceRegistry",
    "EncodeFailure",
    "MalformedPayload",
    "ProtocolBinding",
    "RawFrame",
    "UnknownDevice",
    "command_route",
    "decode_command_frame",
    "emit_command",
    "encode_telemetry",
    "ingest",
    "telemetry_route",
]
