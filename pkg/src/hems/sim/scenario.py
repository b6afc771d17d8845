"""Household scenario files: the YAML schema driving a simulation run.

A scenario pins everything needed for a reproducible run: the device
fleet with behavior parameters and protocol bindings, the outdoor
temperature curve, tariff bands, scripted demand-response signals,
injected faults, and the RNG seed. See ``scenarios/one-home.yaml`` for a
commented example of every stanza.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import List, Optional

import yaml

from ..model import (
    ActionKind,
    DeviceCategory,
    DeviceDescriptor,
    DrSignal,
    MetricKind,
    Protocol,
    TariffBand,
    TariffSchedule,
    validate_fleet,
)
from .devices import (
    BaselineLoad,
    CyclerLoad,
    EvCharger,
    FaultKind,
    FaultSpec,
    HumiditySensor,
    LightSensor,
    OccupancySensor,
    PvGenerator,
    ScheduledLoad,
    TemperatureSensor,
    Thermostat,
)


class ScenarioError(ValueError):
    """Scenario file rejected; message carries the offending key."""


@dataclass(frozen=True)
class DeviceSpec:
    descriptor: DeviceDescriptor
    behavior: object
    rank: int = 1  # curtailment priority; 0 = never curtail
    curtailable: bool = False
    flexible: bool = False
    tags: tuple = ()
    faults: tuple = ()
    label: str = ""


@dataclass(frozen=True)
class FlexLoadSpec:
    load_id: str
    power_w: float
    duration_slots: int
    earliest_slot: int
    latest_slot: int


@dataclass(frozen=True)
class DrSignalSpec:
    signal_id: str
    target_reduction_w: float
    start_offset_s: int
    duration_s: int

    def to_signal(self, start_ms: int) -> DrSignal:
        begin = start_ms + self.start_offset_s * 1000
        return DrSignal(self.signal_id, self.target_reduction_w, begin, begin + self.duration_s * 1000)


@dataclass(frozen=True)
class HouseholdScenario:
    name: str
    home_id: str
    start_ms: int
    tick_seconds: int
    duration_s: int
    rng_seed: int
    ambient_hourly_c: tuple
    tariff: TariffSchedule
    devices: tuple = ()
    dr_signals: tuple = ()
    flex_loads: tuple = ()
    flex_slot_seconds: int = 3600
    flex_peak_cap_w: Optional[float] = None
    auth_token: str = "dev-token"

    @property
    def n_ticks(self) -> int:
        return self.duration_s // self.tick_seconds

    def validate(self) -> List[str]:
        problems = []
        if self.tick_seconds <= 0 or 3600 % self.tick_seconds != 0:
            problems.append("tick_seconds must be positive and divide 3600")
        if self.duration_s % self.tick_seconds != 0:
            problems.append("duration must be a whole number of ticks")
        if not self.ambient_hourly_c:
            problems.append("ambient curve is empty")
        problems.extend(self.tariff.validate().violations)
        problems.extend(validate_fleet(d.descriptor for d in self.devices).violations)
        return problems


_BEHAVIOR_METRICS = {
    BaselineLoad: {MetricKind.POWER_W, MetricKind.ENERGY_WH},
    CyclerLoad: {MetricKind.POWER_W, MetricKind.ENERGY_WH},
    ScheduledLoad: {MetricKind.POWER_W, MetricKind.ENERGY_WH},
    Thermostat: {MetricKind.POWER_W, MetricKind.ENERGY_WH},
    EvCharger: {MetricKind.POWER_W},  # signed power, so no cumulative energy metric
    PvGenerator: {MetricKind.POWER_W},
    TemperatureSensor: {MetricKind.TEMPERATURE_C},
    HumiditySensor: {MetricKind.HUMIDITY_PCT},
    LightSensor: {MetricKind.LIGHT_LUX},
    OccupancySensor: {MetricKind.OCCUPANCY},
}

_BEHAVIOR_ACTIONS = {
    BaselineLoad: {ActionKind.SWITCH_ON, ActionKind.SWITCH_OFF},
    CyclerLoad: {ActionKind.SWITCH_ON, ActionKind.SWITCH_OFF},
    ScheduledLoad: {ActionKind.SWITCH_ON, ActionKind.SWITCH_OFF},
    Thermostat: {ActionKind.SWITCH_ON, ActionKind.SWITCH_OFF, ActionKind.SET_SETPOINT_C},
    EvCharger: {ActionKind.SET_CHARGE_RATE_W, ActionKind.SWITCH_ON, ActionKind.SWITCH_OFF},
}

_BEHAVIOR_CATEGORY = {
    BaselineLoad: DeviceCategory.CONTROLLER,
    CyclerLoad: DeviceCategory.CONTROLLER,
    ScheduledLoad: DeviceCategory.CONTROLLER,
    Thermostat: DeviceCategory.CONTROLLER,
    EvCharger: DeviceCategory.CONTROLLER,
    PvGenerator: DeviceCategory.METER,
    TemperatureSensor: DeviceCategory.SENSOR,
    HumiditySensor: DeviceCategory.SENSOR,
    LightSensor: DeviceCategory.SENSOR,
    OccupancySensor: DeviceCategory.SENSOR,
}


def _windows(raw, key: str) -> tuple:
    try:
        return tuple((float(w[0]), float(w[1])) for w in raw)
    except (TypeError, IndexError, ValueError):
        raise ScenarioError(f"{key}: windows must be [start_hour, end_hour] pairs") from None


def _build_behavior(kind: str, params: dict, key: str):
    try:
        if kind == "baseline":
            return BaselineLoad(power_w=float(params["power_w"]))
        if kind == "cycler":
            return CyclerLoad(
                power_w=float(params["power_w"]),
                period_s=int(params["period_s"]),
                on_s=int(params["on_s"]),
                offset_s=int(params.get("offset_s", 0)),
            )
        if kind == "scheduled":
            return ScheduledLoad(
                power_w=float(params["power_w"]),
                windows=_windows(params["windows"], key),
            )
        if kind == "thermostat":
            return Thermostat(
                rated_w=float(params["rated_w"]),
                k_loss_per_s=float(params["k_loss_per_s"]),
                k_heat_c_per_s=float(params["k_heat_c_per_s"]),
                initial_temp_c=float(params["initial_temp_c"]),
                setpoint_c=float(params["setpoint_c"]),
                hysteresis_c=float(params.get("hysteresis_c", 1.0)),
            )
        if kind == "ev_charger":
            return EvCharger(
                max_rate_w=float(params["max_rate_w"]),
                battery_capacity_wh=float(params["battery_capacity_wh"]),
                initial_battery_wh=float(params.get("initial_battery_wh", 0.0)),
                default_rate_w=float(params.get("default_rate_w", params["max_rate_w"])),
                plugged_windows=_windows(params["plugged_windows"], key),
            )
        if kind == "pv":
            return PvGenerator(
                peak_w=float(params["peak_w"]),
                curve=tuple(float(x) for x in params["curve"]),
            )
        if kind == "temperature_sensor":
            return TemperatureSensor(
                tracks_device=params.get("tracks_device"),
                offset_c=float(params.get("offset_c", 0.0)),
                noise_c=float(params.get("noise_c", 0.0)),
            )
        if kind == "humidity_sensor":
            return HumiditySensor(
                curve_pct=tuple(float(x) for x in params["curve_pct"]),
                noise_pct=float(params.get("noise_pct", 0.0)),
            )
        if kind == "light_sensor":
            return LightSensor(
                curve_lux=tuple(float(x) for x in params["curve_lux"]),
                noise_lux=float(params.get("noise_lux", 0.0)),
            )
        if kind == "occupancy_sensor":
            return OccupancySensor(occupied_windows=_windows(params["occupied_windows"], key))
    except KeyError as exc:
        raise ScenarioError(f"{key}: behavior {kind!r} missing parameter {exc}") from None
    raise ScenarioError(f"{key}: unknown behavior kind {kind!r}")


def _parse_faults(raw, start_ms: int, key: str) -> tuple:
    faults = []
    for item in raw or ():
        try:
            kind = FaultKind(item["kind"])
        except (KeyError, ValueError):
            raise ScenarioError(f"{key}: fault needs a valid 'kind'") from None
        faults.append(
            FaultSpec(
                kind=kind,
                onset_ms=start_ms + int(item.get("onset_offset_s", 0)) * 1000,
                phantom_w=float(item.get("phantom_w", 0.0)),
                rate_per_day=float(item.get("rate_per_day", 0.0)),
            )
        )
    return tuple(faults)


def _parse_start(raw) -> int:
    if isinstance(raw, int):
        return raw
    if isinstance(raw, datetime):
        if raw.tzinfo is None:
            raw = raw.replace(tzinfo=timezone.utc)
        return int(raw.timestamp() * 1000)
    if isinstance(raw, str):
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(dt.timestamp() * 1000)
    raise ScenarioError("scenario.start must be an ISO-8601 datetime or UTC ms integer")


def scenario_from_dict(data: dict, name: str = "scenario") -> HouseholdScenario:
    try:
        top = data["scenario"]
        home_id = str(top["home_id"])
        start_ms = _parse_start(top["start"])
        tick_seconds = int(top["tick_seconds"])
        duration_s = int(top["duration_s"])
        rng_seed = int(top.get("rng_seed", 0))
    except KeyError as exc:
        raise ScenarioError(f"scenario: missing key {exc}") from None

    ambient = tuple(float(x) for x in data.get("ambient", {}).get("hourly_c", (15.0,)))

    tariff_raw = data.get("tariff", {})
    bands = tuple(
        TariffBand(int(b["start_hour"]), int(b["end_hour"]), float(b["price_per_kwh"]))
        for b in tariff_raw.get("bands", ({"start_hour": 0, "end_hour": 24, "price_per_kwh": 0.25},))
    )
    peaks = tuple((float(w[0]), float(w[1])) for w in tariff_raw.get("peak_windows", ()))
    tariff = TariffSchedule(bands=bands, peak_windows=peaks)

    devices = []
    for raw in data.get("devices", ()):
        try:
            device_id = str(raw["device_id"])
            behavior_kind = str(raw["behavior"])
        except KeyError as exc:
            raise ScenarioError(f"devices: entry missing key {exc}") from None
        key = f"devices.{device_id}"
        behavior = _build_behavior(behavior_kind, raw.get("params", {}), key)
        btype = type(behavior)
        metrics = set(_BEHAVIOR_METRICS[btype])
        if not raw.get("metered", True):
            metrics -= {MetricKind.POWER_W, MetricKind.ENERGY_WH}
        capabilities = frozenset(metrics) | frozenset(_BEHAVIOR_ACTIONS.get(btype, ()))
        try:
            protocol = Protocol(str(raw.get("protocol", "http")))
        except ValueError:
            raise ScenarioError(f"{key}: unknown protocol {raw.get('protocol')!r}") from None
        descriptor = DeviceDescriptor(
            device_id=device_id,
            home_id=home_id,
            room=str(raw.get("room", "")),
            category=_BEHAVIOR_CATEGORY[btype],
            protocol=protocol,
            capabilities=capabilities,
            seq_epoch=int(raw.get("seq_epoch", 0)),
        )
        devices.append(
            DeviceSpec(
                descriptor=descriptor,
                behavior=behavior,
                rank=int(raw.get("rank", 1)),
                curtailable=bool(raw.get("curtailable", False)),
                flexible=bool(raw.get("flexible", False)),
                tags=tuple(str(t) for t in raw.get("tags", ())),
                faults=_parse_faults(raw.get("faults"), start_ms, key),
                label=str(raw.get("label", device_id)),
            )
        )

    signals = tuple(
        DrSignalSpec(
            signal_id=str(s["signal_id"]),
            target_reduction_w=float(s["target_reduction_w"]),
            start_offset_s=int(s["start_offset_s"]),
            duration_s=int(s["duration_s"]),
        )
        for s in data.get("dr_signals", ())
    )

    flex_raw = data.get("flexibility", {})
    flex_loads = tuple(
        FlexLoadSpec(
            load_id=str(l["load_id"]),
            power_w=float(l["power_w"]),
            duration_slots=int(l["duration_slots"]),
            earliest_slot=int(l["earliest_slot"]),
            latest_slot=int(l["latest_slot"]),
        )
        for l in flex_raw.get("loads", ())
    )

    scenario = HouseholdScenario(
        name=name,
        home_id=home_id,
        start_ms=start_ms,
        tick_seconds=tick_seconds,
        duration_s=duration_s,
        rng_seed=rng_seed,
        ambient_hourly_c=ambient,
        tariff=tariff,
        devices=tuple(devices),
        dr_signals=signals,
        flex_loads=flex_loads,
        flex_slot_seconds=int(flex_raw.get("slot_seconds", 3600)),
        flex_peak_cap_w=(
            float(flex_raw["peak_cap_w"]) if flex_raw.get("peak_cap_w") is not None else None
        ),
        auth_token=str(top.get("auth_token", "dev-token")),
    )
    problems = scenario.validate()
    if problems:
        raise ScenarioError("; ".join(problems))
    return scenario


def load_scenario(path: str) -> HouseholdScenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ScenarioError(f"{path}: YAML parse error{where}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    name = data.get("scenario", {}).get("name") or path.rsplit("/", 1)[-1]
    return scenario_from_dict(data, name=str(name))
