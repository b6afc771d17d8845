"""Canonical domain model shared by every layer of the stack.

All components exchange the value types defined here; protocol adapters
translate device-native frames into them and back, so the rest of the
system never sees transport details.

Canonical units are fixed once, system-wide:

- power: watts (signed for bidirectional devices such as EV chargers)
- energy: watt-hours, cumulative per device
- temperature: degrees Celsius
- humidity: percent (0-100)
- occupancy: 0 or 1
- illuminance: lux
- time: UTC milliseconds since the epoch

Every type is immutable; validation returns violations instead of raising
so callers can log and continue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Union

__all__ = [
    "DeviceCategory",
    "Protocol",
    "MetricKind",
    "ActionKind",
    "CommandOrigin",
    "EventKind",
    "Severity",
    "Capability",
    "DeviceDescriptor",
    "Measurement",
    "ControlCommand",
    "Event",
    "TariffBand",
    "TariffSchedule",
    "DrSignal",
    "ValidationResult",
    "validate_descriptor",
    "validate_fleet",
    "validate_measurement",
    "validate_command",
    "validate_event",
    "dedup_key",
    "EnergyMonotonicityChecker",
    "SETPOINT_MIN_C",
    "SETPOINT_MAX_C",
]


class DeviceCategory(str, Enum):
    METER = "meter"
    SENSOR = "sensor"
    CONTROLLER = "controller"


class Protocol(str, Enum):
    MQTT = "mqtt"
    COAP = "coap"
    HTTP = "http"


class MetricKind(str, Enum):
    """Telemetry metrics. Wire values double as route segments."""

    POWER_W = "power"
    ENERGY_WH = "energy"
    TEMPERATURE_C = "temperature"
    HUMIDITY_PCT = "humidity"
    OCCUPANCY = "occupancy"
    LIGHT_LUX = "light"


class ActionKind(str, Enum):
    SWITCH_ON = "switch_on"
    SWITCH_OFF = "switch_off"
    SET_SETPOINT_C = "set_setpoint"
    SET_CHARGE_RATE_W = "set_charge_rate"


# Actions that carry a numeric argument.
_ACTIONS_WITH_ARG = {ActionKind.SET_SETPOINT_C, ActionKind.SET_CHARGE_RATE_W}

SETPOINT_MIN_C = 5.0
SETPOINT_MAX_C = 35.0


class CommandOrigin(str, Enum):
    USER = "user"
    EDGE = "edge"
    CLOUD = "cloud"


class EventKind(str, Enum):
    ANOMALY = "anomaly"
    DR_SIGNAL = "dr_signal"
    COMMAND_ISSUED = "command_issued"
    COMMAND_APPLIED = "command_applied"
    MAINTENANCE_ALERT = "maintenance_alert"
    RECOMMENDATION = "recommendation"
    SYSTEM_ALERT = "system_alert"


class Severity(str, Enum):
    INFO = "info"
    WARNING = "warning"
    CRITICAL = "critical"


Capability = Union[MetricKind, ActionKind]

_SENSOR_METRICS = frozenset(
    {
        MetricKind.TEMPERATURE_C,
        MetricKind.HUMIDITY_PCT,
        MetricKind.OCCUPANCY,
        MetricKind.LIGHT_LUX,
    }
)
_METER_METRICS = frozenset({MetricKind.POWER_W, MetricKind.ENERGY_WH})


def capability_from_wire(value: str) -> Capability:
    """Map a wire string to a capability; metric and action names are disjoint."""
    try:
        return MetricKind(value)
    except ValueError:
        return ActionKind(value)


@dataclass(frozen=True)
class DeviceDescriptor:
    """Identity and abilities of one device in one home."""

    device_id: str
    home_id: str
    room: str
    category: DeviceCategory
    protocol: Protocol
    capabilities: frozenset = frozenset()
    seq_epoch: int = 0

    def metrics(self) -> frozenset:
        return frozenset(c for c in self.capabilities if isinstance(c, MetricKind))

    def actions(self) -> frozenset:
        return frozenset(c for c in self.capabilities if isinstance(c, ActionKind))


@dataclass(frozen=True)
class Measurement:
    """One canonical telemetry point.

    ``(device_id, seq_epoch, seq)`` is globally unique and serves as the
    deduplication key for at-least-once delivery.
    """

    device_id: str
    metric: MetricKind
    value: float
    timestamp: int
    seq: int
    seq_epoch: int = 0


@dataclass(frozen=True)
class ControlCommand:
    """Actuation request routed cloud -> edge -> device."""

    command_id: str
    device_id: str
    action: ActionKind
    origin: CommandOrigin
    issued_at: int
    arg: Optional[float] = None


@dataclass(frozen=True)
class Event:
    """Logged occurrence: anomalies, DR signals, command audit, alerts."""

    event_id: str
    kind: EventKind
    severity: Severity
    source: str
    timestamp: int
    payload: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class TariffBand:
    start_hour: int
    end_hour: int
    price_per_kwh: float


@dataclass(frozen=True)
class TariffSchedule:
    """Price bands covering the 24-hour day plus the declared peak windows."""

    bands: tuple = ()
    peak_windows: tuple = ()

    def validate(self) -> "ValidationResult":
        violations = []
        covered = [False] * 24
        for band in self.bands:
            if not (0 <= band.start_hour < band.end_hour <= 24):
                violations.append(f"band {band.start_hour}-{band.end_hour} out of range")
                continue
            if band.price_per_kwh <= 0:
                violations.append(f"band {band.start_hour}-{band.end_hour} price not positive")
            for h in range(band.start_hour, band.end_hour):
                if covered[h]:
                    violations.append(f"hour {h} covered by more than one band")
                covered[h] = True
        missing = [h for h in range(24) if not covered[h]]
        if missing:
            violations.append(f"hours not covered by any band: {missing}")
        for start, end in self.peak_windows:
            if not (0 <= start < end <= 24):
                violations.append(f"peak window {start}-{end} out of range")
        return ValidationResult(tuple(violations))

    def price_at_hour(self, hour: float) -> float:
        h = math.floor(hour) % 24
        for band in self.bands:
            if band.start_hour <= h < band.end_hour:
                return band.price_per_kwh
        raise ValueError(f"no tariff band covers hour {h}")

    def cheapest_price(self) -> float:
        return min(b.price_per_kwh for b in self.bands)

    def in_peak_window(self, hour: float) -> bool:
        h = hour % 24
        return any(start <= h < end for start, end in self.peak_windows)


@dataclass(frozen=True)
class DrSignal:
    """Curtailment request: reduce household draw by a target for a window."""

    signal_id: str
    target_reduction_w: float
    window_start: int
    window_end: int


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_descriptor(descriptor: DeviceDescriptor) -> ValidationResult:
    """Check a single descriptor against the device taxonomy."""
    violations = []
    if not descriptor.device_id:
        violations.append("empty device_id")
    if not descriptor.home_id:
        violations.append("empty home_id")
    if descriptor.seq_epoch < 0:
        violations.append("negative seq_epoch")
    metrics = descriptor.metrics()
    actions = descriptor.actions()
    if descriptor.category is DeviceCategory.METER:
        if actions:
            violations.append("action capability on non-controller")
        extra = metrics - _METER_METRICS
        if extra:
            violations.append(f"meter cannot expose {sorted(m.value for m in extra)}")
    elif descriptor.category is DeviceCategory.SENSOR:
        if actions:
            violations.append("action capability on non-controller")
        extra = metrics - _SENSOR_METRICS
        if extra:
            violations.append(f"sensor cannot expose {sorted(m.value for m in extra)}")
    elif descriptor.category is DeviceCategory.CONTROLLER:
        if not actions:
            violations.append("controller needs at least one action capability")
        extra = metrics - _METER_METRICS
        if extra:
            violations.append(
                f"controller may only meter power/energy, not {sorted(m.value for m in extra)}"
            )
    return ValidationResult(tuple(violations))


def validate_fleet(descriptors: Iterable[DeviceDescriptor]) -> ValidationResult:
    """Validate each descriptor and the per-home device_id uniqueness rule."""
    violations = []
    seen = set()
    for d in descriptors:
        for v in validate_descriptor(d).violations:
            violations.append(f"{d.device_id}: {v}")
        key = (d.home_id, d.device_id)
        if key in seen:
            violations.append(f"{d.device_id}: duplicate id in home {d.home_id}")
        seen.add(key)
    return ValidationResult(tuple(violations))


def validate_measurement(m: Measurement) -> ValidationResult:
    violations = []
    if not m.device_id:
        violations.append("empty device_id")
    if not isinstance(m.value, (int, float)) or not math.isfinite(m.value):
        violations.append("value not finite")
    else:
        if m.metric is MetricKind.HUMIDITY_PCT and not (0.0 <= m.value <= 100.0):
            violations.append(f"humidity {m.value} outside [0, 100]")
        if m.metric is MetricKind.OCCUPANCY and m.value not in (0.0, 1.0):
            violations.append(f"occupancy {m.value} not in {{0, 1}}")
    if m.seq < 0:
        violations.append("negative seq")
    if m.seq_epoch < 0:
        violations.append("negative seq_epoch")
    return ValidationResult(tuple(violations))


def validate_command(
    cmd: ControlCommand,
    capabilities: Optional[frozenset] = None,
    max_charge_rate_w: Optional[float] = None,
) -> ValidationResult:
    """Range-check a command; capability membership is checked when known."""
    violations = []
    if not cmd.command_id:
        violations.append("empty command_id")
    if not cmd.device_id:
        violations.append("empty device_id")
    if cmd.action in _ACTIONS_WITH_ARG:
        if cmd.arg is None or not math.isfinite(cmd.arg):
            violations.append(f"{cmd.action.value} requires a finite numeric argument")
        elif cmd.action is ActionKind.SET_SETPOINT_C and not (
            SETPOINT_MIN_C <= cmd.arg <= SETPOINT_MAX_C
        ):
            violations.append(
                f"setpoint {cmd.arg} outside [{SETPOINT_MIN_C}, {SETPOINT_MAX_C}]"
            )
        elif (
            cmd.action is ActionKind.SET_CHARGE_RATE_W
            and max_charge_rate_w is not None
            and not (-max_charge_rate_w <= cmd.arg <= max_charge_rate_w)
        ):
            violations.append(
                f"charge rate {cmd.arg} outside [-{max_charge_rate_w}, {max_charge_rate_w}]"
            )
    elif cmd.arg is not None:
        violations.append(f"{cmd.action.value} takes no argument")
    if capabilities is not None and cmd.action not in capabilities:
        violations.append(f"action {cmd.action.value} not in device capabilities")
    return ValidationResult(tuple(violations))


def validate_event(e: Event) -> ValidationResult:
    violations = []
    if not e.event_id:
        violations.append("empty event_id")
    if not e.source:
        violations.append("empty source")
    return ValidationResult(tuple(violations))


def dedup_key(m: Measurement) -> tuple:
    """Stable idempotency key: equal measurements map to equal keys."""
    return (m.device_id, m.seq_epoch, m.seq)


class EnergyMonotonicityChecker:
    """Stream check: cumulative energy never decreases within a seq epoch."""

    def __init__(self) -> None:
        self._last: dict = {}

    def observe(self, m: Measurement) -> Optional[str]:
        if m.metric is not MetricKind.ENERGY_WH:
            return None
        key = (m.device_id, m.seq_epoch)
        prev = self._last.get(key)
        self._last[key] = m.value
        if prev is not None and m.value < prev:
            return f"{m.device_id}: energy decreased {prev} -> {m.value} within epoch {m.seq_epoch}"
        return None
