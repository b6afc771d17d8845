"""Device behavior models and the per-tick state transition.

Loads are piecewise-constant duty cycles so meter energy integrals stay
exact; seeded noise is applied to environment sensors only. Thermostats
follow a first-order thermal model:

    T' = T + dt * (k_loss * (ambient - T) + k_heat * heating_on)

Commands take effect on the tick after they are queued, and every applied
command emits a command_applied event.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

from ..model import (
    ActionKind,
    ControlCommand,
    DeviceDescriptor,
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Severity,
)

MS_PER_DAY = 86_400_000


class UnsupportedAction(Exception):
    """Command action is not in the device's capabilities."""


class InapplicableFault(Exception):
    """Fault kind does not apply to this device category/behavior."""


class FaultKind(str, Enum):
    STUCK_SENSOR = "stuck_sensor"
    PHANTOM_LOAD = "phantom_load"
    DEGRADATION = "degradation"


@dataclass(frozen=True)
class FaultSpec:
    kind: FaultKind
    onset_ms: int
    phantom_w: float = 0.0
    rate_per_day: float = 0.0


def _hours_of_day(t_ms: int) -> float:
    return (t_ms % MS_PER_DAY) / 3_600_000.0


def interp_daily_curve(points: Sequence[float], t_ms: int) -> float:
    """Piecewise-linear interpolation over a repeating 24 h curve.

    ``points`` are equally spaced samples starting at midnight; the curve
    wraps around, so every tick sees a slightly different value and an
    idle sensor never emits two bitwise-identical readings by accident.
    """
    n = len(points)
    if n == 1:
        return points[0]
    pos = _hours_of_day(t_ms) * n / 24.0
    i = int(pos) % n
    frac = pos - int(pos)
    return points[i] * (1.0 - frac) + points[(i + 1) % n] * frac


def in_daily_window(windows: Sequence[Tuple[float, float]], t_ms: int) -> bool:
    h = _hours_of_day(t_ms)
    return any(start <= h < end for start, end in windows)


# --- behaviors ------------------------------------------------------------


@dataclass(frozen=True)
class BaselineLoad:
    """Constant draw while switched on (router, standby rack, ...)."""

    power_w: float


@dataclass(frozen=True)
class CyclerLoad:
    """Fixed on/off duty cycle (fridge compressor, pump)."""

    power_w: float
    period_s: int
    on_s: int
    offset_s: int = 0


@dataclass(frozen=True)
class ScheduledLoad:
    """Runs at rated power inside daily windows (water heater, washer)."""

    power_w: float
    windows: tuple  # ((start_hour, end_hour), ...)


@dataclass(frozen=True)
class Thermostat:
    """Hysteresis-controlled heater owning the room's simulated temperature."""

    rated_w: float
    k_loss_per_s: float
    k_heat_c_per_s: float
    initial_temp_c: float
    setpoint_c: float
    hysteresis_c: float = 1.0


@dataclass(frozen=True)
class EvCharger:
    """EV charge point with signed power; discharge feeds the home (V2G)."""

    max_rate_w: float
    battery_capacity_wh: float
    initial_battery_wh: float
    default_rate_w: float
    plugged_windows: tuple  # daily (start_hour, end_hour) windows


@dataclass(frozen=True)
class PvGenerator:
    """Rooftop PV as a scenario-supplied daily curve; power is negative."""

    peak_w: float
    curve: tuple  # relative output 0..1, equally spaced over 24 h


@dataclass(frozen=True)
class TemperatureSensor:
    """Reports a thermostat's room temperature, or ambient plus an offset."""

    tracks_device: Optional[str] = None
    offset_c: float = 0.0
    noise_c: float = 0.0


@dataclass(frozen=True)
class HumiditySensor:
    curve_pct: tuple
    noise_pct: float = 0.0


@dataclass(frozen=True)
class LightSensor:
    curve_lux: tuple
    noise_lux: float = 0.0


@dataclass(frozen=True)
class OccupancySensor:
    occupied_windows: tuple  # daily (start_hour, end_hour)


Behavior = (
    BaselineLoad,
    CyclerLoad,
    ScheduledLoad,
    Thermostat,
    EvCharger,
    PvGenerator,
    TemperatureSensor,
    HumiditySensor,
    LightSensor,
    OccupancySensor,
)

_LOAD_BEHAVIORS = (BaselineLoad, CyclerLoad, ScheduledLoad, Thermostat, EvCharger)
_CYCLE_BEHAVIORS = (CyclerLoad, ScheduledLoad)
_SENSOR_BEHAVIORS = (TemperatureSensor, HumiditySensor, LightSensor, OccupancySensor)


@dataclass(frozen=True)
class DeviceState:
    """Full simulated state of one device; advanced by :func:`step_device`."""

    descriptor: DeviceDescriptor
    behavior: object
    power_w: float = 0.0
    energy_wh: float = 0.0
    switch_on: bool = True
    setpoint_c: Optional[float] = None
    indoor_temp_c: Optional[float] = None
    heating_on: bool = False
    charge_rate_w: Optional[float] = None
    battery_wh: float = 0.0
    battery_capacity_wh: float = 0.0
    fault: Optional[FaultSpec] = None
    seq: int = 0
    pending: tuple = ()
    last_values: tuple = ()  # ((metric, value), ...) of the previous emissions
    was_running: bool = False
    cycle_multiplier: float = 1.0


def new_state(descriptor: DeviceDescriptor, behavior) -> DeviceState:
    state = DeviceState(descriptor=descriptor, behavior=behavior)
    if isinstance(behavior, Thermostat):
        state = replace(
            state,
            indoor_temp_c=behavior.initial_temp_c,
            setpoint_c=behavior.setpoint_c,
        )
    if isinstance(behavior, EvCharger):
        state = replace(
            state,
            battery_wh=behavior.initial_battery_wh,
            battery_capacity_wh=behavior.battery_capacity_wh,
            charge_rate_w=behavior.default_rate_w,
        )
    return state


def queue_command(state: DeviceState, cmd: ControlCommand) -> DeviceState:
    """Accept a command for application on the next tick.

    Raises :class:`UnsupportedAction` when the action is outside the
    device's capabilities; the caller turns that into a warning event.
    """
    if cmd.action not in state.descriptor.actions():
        raise UnsupportedAction(f"{state.descriptor.device_id} does not support {cmd.action.value}")
    return replace(state, pending=state.pending + (cmd,))


def apply_command(state: DeviceState, cmd: ControlCommand) -> DeviceState:
    """Apply one command to the state (capability already checked on queue)."""
    if cmd.action is ActionKind.SWITCH_ON:
        return replace(state, switch_on=True)
    if cmd.action is ActionKind.SWITCH_OFF:
        return replace(state, switch_on=False)
    if cmd.action is ActionKind.SET_SETPOINT_C:
        return replace(state, setpoint_c=float(cmd.arg))
    if cmd.action is ActionKind.SET_CHARGE_RATE_W:
        limit = getattr(state.behavior, "max_rate_w", abs(float(cmd.arg)))
        rate = max(-limit, min(limit, float(cmd.arg)))
        return replace(state, charge_rate_w=rate)
    raise UnsupportedAction(cmd.action.value)


def inject_fault(state: DeviceState, fault: FaultSpec) -> DeviceState:
    """Attach a fault; behavior changes from the fault's onset onward."""
    if fault.kind is FaultKind.STUCK_SENSOR and not isinstance(state.behavior, _SENSOR_BEHAVIORS):
        raise InapplicableFault("stuck_sensor applies to sensing devices")
    if fault.kind is FaultKind.PHANTOM_LOAD and not isinstance(state.behavior, _LOAD_BEHAVIORS):
        raise InapplicableFault("phantom_load applies to switchable loads")
    if fault.kind is FaultKind.DEGRADATION and not isinstance(state.behavior, _CYCLE_BEHAVIORS):
        raise InapplicableFault("degradation applies to duty-cycle loads")
    return replace(state, fault=fault)


def _fault_active(state: DeviceState, kind: FaultKind, now_ms: int) -> bool:
    return state.fault is not None and state.fault.kind is kind and now_ms >= state.fault.onset_ms


def _nominal_power(state: DeviceState, now_ms: int) -> Tuple[float, DeviceState]:
    """Rated draw for the interval starting at now_ms, before switch/faults."""
    b = state.behavior
    if isinstance(b, BaselineLoad):
        return b.power_w, state
    if isinstance(b, CyclerLoad):
        phase = ((now_ms // 1000) + b.offset_s) % b.period_s
        return (b.power_w if phase < b.on_s else 0.0), state
    if isinstance(b, ScheduledLoad):
        return (b.power_w if in_daily_window(b.windows, now_ms) else 0.0), state
    if isinstance(b, Thermostat):
        temp = state.indoor_temp_c
        heating = state.heating_on
        if temp < state.setpoint_c - b.hysteresis_c / 2.0:
            heating = True
        elif temp > state.setpoint_c + b.hysteresis_c / 2.0:
            heating = False
        state = replace(state, heating_on=heating)
        return (b.rated_w if heating else 0.0), state
    if isinstance(b, EvCharger):
        if not in_daily_window(b.plugged_windows, now_ms):
            return 0.0, state
        return float(state.charge_rate_w), state
    if isinstance(b, PvGenerator):
        return -b.peak_w * interp_daily_curve(b.curve, now_ms), state
    return 0.0, state


def step_device(
    state: DeviceState,
    now_ms: int,
    dt_s: int,
    ambient_c: float,
    rng: random.Random,
) -> Tuple[DeviceState, List[Measurement], List[Event]]:
    """Advance one tick ending at ``now_ms + dt_s``.

    Returns the new state, the tick's measurements (one per exposed
    metric, seq incremented by exactly one per emission), and any
    command_applied events for commands queued before this tick.
    """
    end_ms = now_ms + dt_s * 1000

    applied = state.pending
    for cmd in applied:
        state = apply_command(state, cmd)
    state = replace(state, pending=())

    nominal, state = _nominal_power(state, now_ms)

    is_sensor = isinstance(state.behavior, _SENSOR_BEHAVIORS)
    phantom = _fault_active(state, FaultKind.PHANTOM_LOAD, now_ms)
    if is_sensor:
        power = 0.0
    elif not state.switch_on:
        power = state.fault.phantom_w if phantom else 0.0
    else:
        power = nominal
        starting = nominal != 0.0 and not state.was_running
        if isinstance(state.behavior, _CYCLE_BEHAVIORS):
            mult = state.cycle_multiplier
            if starting:
                mult = 1.0
                if _fault_active(state, FaultKind.DEGRADATION, now_ms):
                    days = (now_ms - state.fault.onset_ms) / MS_PER_DAY
                    mult = 1.0 + state.fault.rate_per_day * days
            state = replace(state, cycle_multiplier=mult)
            power = nominal * state.cycle_multiplier
    state = replace(state, was_running=nominal != 0.0 and state.switch_on)

    if isinstance(state.behavior, EvCharger):
        # Clamp to state of charge so battery bounds and the energy
        # integral stay consistent.
        delta_wh = power * dt_s / 3600.0
        headroom = state.battery_capacity_wh - state.battery_wh
        delta_wh = max(-state.battery_wh, min(headroom, delta_wh))
        power = delta_wh * 3600.0 / dt_s
        state = replace(state, battery_wh=state.battery_wh + delta_wh)

    state = replace(state, power_w=power, energy_wh=state.energy_wh + power * dt_s / 3600.0)

    if isinstance(state.behavior, Thermostat):
        b = state.behavior
        heat = 1.0 if (state.heating_on and state.switch_on) else 0.0
        temp = state.indoor_temp_c + dt_s * (
            b.k_loss_per_s * (ambient_c - state.indoor_temp_c) + b.k_heat_c_per_s * heat
        )
        state = replace(state, indoor_temp_c=temp)

    events = [
        Event(
            event_id=f"applied-{cmd.command_id}",
            kind=EventKind.COMMAND_APPLIED,
            severity=Severity.INFO,
            source=state.descriptor.device_id,
            timestamp=end_ms,
            payload={
                "command_id": cmd.command_id,
                "action": cmd.action.value,
                "arg": cmd.arg,
                "switch_on": state.switch_on,
            },
        )
        for cmd in applied
    ]

    measurements: List[Measurement] = []
    stuck = _fault_active(state, FaultKind.STUCK_SENSOR, now_ms)
    previous = dict(state.last_values)
    emitted = []
    seq = state.seq
    for metric in sorted(state.descriptor.metrics(), key=lambda m: m.value):
        if stuck and metric in previous:
            value = previous[metric]
        else:
            value = _metric_value(state, metric, end_ms, ambient_c, rng)
        measurements.append(
            Measurement(
                device_id=state.descriptor.device_id,
                metric=metric,
                value=value,
                timestamp=end_ms,
                seq=seq,
                seq_epoch=state.descriptor.seq_epoch,
            )
        )
        emitted.append((metric, value))
        seq += 1
    state = replace(state, seq=seq, last_values=tuple(emitted))
    return state, measurements, events


def _metric_value(
    state: DeviceState, metric: MetricKind, t_ms: int, ambient_c: float, rng: random.Random
) -> float:
    b = state.behavior
    if metric is MetricKind.POWER_W:
        return state.power_w
    if metric is MetricKind.ENERGY_WH:
        return state.energy_wh
    if metric is MetricKind.TEMPERATURE_C:
        base = ambient_c + b.offset_c
        noise = rng.gauss(0.0, b.noise_c) if b.noise_c else 0.0
        return base + noise
    if metric is MetricKind.HUMIDITY_PCT:
        value = interp_daily_curve(b.curve_pct, t_ms)
        if b.noise_pct:
            value += rng.gauss(0.0, b.noise_pct)
        return min(100.0, max(0.0, value))
    if metric is MetricKind.LIGHT_LUX:
        value = interp_daily_curve(b.curve_lux, t_ms)
        if b.noise_lux:
            value += rng.gauss(0.0, b.noise_lux)
        return max(0.0, value)
    if metric is MetricKind.OCCUPANCY:
        return 1.0 if in_daily_window(b.occupied_windows, t_ms) else 0.0
    raise ValueError(f"device {state.descriptor.device_id} cannot produce {metric.value}")
