"""Fleet orchestration: advance every device on the scenario clock.

Devices step in device-id order, so given the same scenario and seed the
emission log is identical run to run. Transports deliver emissions after
each tick; the fleet itself never touches sockets.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from ..model import ControlCommand, Event, EventKind, Measurement, Severity
from .devices import (
    DeviceState,
    FaultSpec,
    TemperatureSensor,
    UnsupportedAction,
    inject_fault,
    interp_daily_curve,
    new_state,
    queue_command,
    step_device,
)
from .scenario import HouseholdScenario


@dataclass
class FaultGroundTruth:
    device_id: str
    kind: str
    onset_ms: int
    onset_tick: int


@dataclass
class FleetRun:
    """Everything a run produced, for reports and test oracles."""

    measurements: List[Measurement] = field(default_factory=list)
    events: List[Event] = field(default_factory=list)
    fault_log: List[FaultGroundTruth] = field(default_factory=list)
    energy_by_device: Dict[str, float] = field(default_factory=dict)


class Fleet:
    """Owns all device state; external interaction only via commands."""

    def __init__(self, scenario: HouseholdScenario):
        self.scenario = scenario
        self.states: Dict[str, DeviceState] = {}
        self._rngs: Dict[str, random.Random] = {}
        self._order: List[str] = []
        self._pending_faults: Dict[str, List[FaultSpec]] = {}
        self._rejected: List[Event] = []
        for spec in sorted(scenario.devices, key=lambda s: s.descriptor.device_id):
            did = spec.descriptor.device_id
            self.states[did] = new_state(spec.descriptor, spec.behavior)
            self._rngs[did] = random.Random(f"{scenario.rng_seed}/{did}")
            self._order.append(did)
            self._pending_faults[did] = sorted(spec.faults, key=lambda f: f.onset_ms)
        self.fault_log: List[FaultGroundTruth] = []

    def queue_command(self, cmd: ControlCommand) -> Optional[Event]:
        """Queue for the target device; returns a warning event on rejection."""
        state = self.states.get(cmd.device_id)
        reason = None
        if state is None:
            reason = f"unknown device {cmd.device_id}"
        else:
            try:
                self.states[cmd.device_id] = queue_command(state, cmd)
            except UnsupportedAction as exc:
                reason = str(exc)
        if reason is None:
            return None
        return Event(
            event_id=f"rejected-{cmd.command_id}",
            kind=EventKind.SYSTEM_ALERT,
            severity=Severity.WARNING,
            source=cmd.device_id,
            timestamp=cmd.issued_at,
            payload={"command_id": cmd.command_id, "reason": reason},
        )

    def ambient_at(self, t_ms: int) -> float:
        return interp_daily_curve(self.scenario.ambient_hourly_c, t_ms)

    def _reference_temp(self, state: DeviceState, t_ms: int) -> float:
        """Temperature a sensor reads: tracked room if wired, else outdoors."""
        behavior = state.behavior
        if isinstance(behavior, TemperatureSensor) and behavior.tracks_device:
            tracked = self.states.get(behavior.tracks_device)
            if tracked is not None and tracked.indoor_temp_c is not None:
                return tracked.indoor_temp_c
        return self.ambient_at(t_ms)

    def step(self, tick: int) -> Tuple[List[Measurement], List[Event]]:
        """Advance every device one tick; returns emissions in device order."""
        sc = self.scenario
        now_ms = sc.start_ms + tick * sc.tick_seconds * 1000
        measurements: List[Measurement] = []
        events: List[Event] = []
        for did in self._order:
            state = self.states[did]
            pending = self._pending_faults[did]
            while pending and pending[0].onset_ms <= now_ms:
                fault = pending.pop(0)
                state = inject_fault(state, fault)
                self.fault_log.append(
                    FaultGroundTruth(did, fault.kind.value, fault.onset_ms, tick)
                )
            reference = self._reference_temp(state, now_ms)
            state, ms, evs = step_device(
                state, now_ms, sc.tick_seconds, reference, self._rngs[did]
            )
            self.states[did] = state
            measurements.extend(ms)
            events.extend(evs)
        return measurements, events


def run_fleet(
    scenario: HouseholdScenario,
    deliver: Optional[Callable[[object], None]] = None,
    command_source: Optional[Callable[[int], List[ControlCommand]]] = None,
) -> FleetRun:
    """Run a scenario to completion in-process at maximum speed.

    ``deliver`` receives every Measurement and Event in emission order;
    ``command_source`` may inject commands before each tick (used by tests
    and by the end-to-end runner's local mode).
    """
    fleet = Fleet(scenario)
    run = FleetRun()
    for tick in range(scenario.n_ticks):
        if command_source is not None:
            for cmd in command_source(tick):
                rejection = fleet.queue_command(cmd)
                if rejection is not None:
                    run.events.append(rejection)
                    if deliver is not None:
                        deliver(rejection)
        measurements, events = fleet.step(tick)
        run.measurements.extend(measurements)
        run.events.extend(events)
        if deliver is not None:
            for m in measurements:
                deliver(m)
            for e in events:
                deliver(e)
    run.fault_log = fleet.fault_log
    run.energy_by_device = {
        did: state.energy_wh for did, state in sorted(fleet.states.items())
    }
    return run
