"""End-to-end scenario execution: devices, gateway, and cloud in one process.

Everything crosses real loopback sockets; nothing is shortcut in memory.
The loop is lockstep so runs are reproducible: each simulated tick steps
every device, pushes its emissions through the bound protocol (blocking
until the gateway has durably accepted each frame), waits for the
gateway's analytics queue to drain, then advances the gateway clock.
Commands always reach a device's inbox during one tick and apply at the
start of the next. The run report is canonical JSON, byte-identical for
identical (scenario, seed).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import replace
from typing import Dict, List, Optional

import requests

from .adapters.hub import CoapDeviceLink, HttpDeviceLink, MqttDeviceLink, SharedCommandServer
from .cloud import CloudApiServer, CloudService
from .gateway import (
    DetectorConfig,
    FleetEntry,
    FlexLoad,
    GatewayConfig,
    HomeGateway,
    Infeasible,
    run_at_earliest,
    schedule_flexible_loads,
    tariff_slot_prices,
)
from .model import EventKind, MetricKind, Protocol
from .sim import Fleet, HouseholdScenario
from .sim.devices import EvCharger
from .wire import canonical_json

WAIT_TIMEOUT_S = 30.0


class RunnerError(Exception):
    pass


class ScenarioRunner:
    def __init__(
        self,
        scenario: HouseholdScenario,
        workdir: str,
        ports_base: Optional[int] = None,
        speed: str = "max",
    ):
        self.scenario = scenario
        self.workdir = workdir
        self.speed = speed
        os.makedirs(workdir, exist_ok=True)
        base = ports_base or 0

        self._ports_base = base
        self.cloud_service = CloudService(os.path.join(workdir, "cloud"))
        self.cloud_api = CloudApiServer(self.cloud_service, port=base + 3 if base else 0)
        self._provision_cloud()

        os.makedirs(os.path.join(workdir, "gateway"), exist_ok=True)
        self.gateway: Optional[HomeGateway] = None
        self.fleet = Fleet(scenario)
        self.links: Dict[str, object] = {}
        self.command_server = SharedCommandServer()
        self._emitted_measurements = 0
        self._emitted_events = 0
        self._power_sums: Dict[str, float] = {}
        self._emission_seqs: Dict[str, List[int]] = {}
        self._session = requests.Session()

    def _fleet_entry(self, spec) -> FleetEntry:
        behavior = spec.behavior
        is_ev = isinstance(behavior, EvCharger)
        return FleetEntry(
            device_id=spec.descriptor.device_id,
            protocol=spec.descriptor.protocol,
            room=spec.descriptor.room,
            rank=spec.rank,
            curtailable=spec.curtailable,
            has_charge_rate=is_ev,
            max_rate_w=behavior.max_rate_w if is_ev else 0.0,
            v2g_discharge_w=behavior.max_rate_w if is_ev and "v2g" in spec.tags else 0.0,
            default_charge_rate_w=behavior.default_rate_w if is_ev else 0.0,
            tags=spec.tags,
        )

    def _provision_cloud(self) -> None:
        sc = self.scenario
        rooms = sorted({spec.descriptor.room for spec in sc.devices if spec.descriptor.room})
        self.cloud_service.provision_home(
            sc.home_id, sc.auth_token, rooms=rooms, tariff=sc.tariff
        )
        for spec in sorted(sc.devices, key=lambda s: s.descriptor.device_id):
            d = spec.descriptor
            self.cloud_service.add_device(
                sc.home_id,
                {
                    "device_id": d.device_id,
                    "category": d.category.value,
                    "protocol": d.protocol.value,
                    "capabilities": sorted(c.value for c in d.capabilities),
                    "room": d.room,
                    "label": spec.label,
                    "rank": spec.rank,
                    "curtailable": spec.curtailable,
                    "flexible": spec.flexible,
                    "tags": list(spec.tags),
                },
                timestamp=sc.start_ms,
            )

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self.cloud_api.start()
        base = self._ports_base
        self.gateway = HomeGateway(
            GatewayConfig(
                home_id=self.scenario.home_id,
                token=self.scenario.auth_token,
                buffer_path=os.path.join(self.workdir, "gateway", "forward.jsonl"),
                mqtt_port=base if base else 0,
                coap_port=base + 1 if base else 0,
                http_port=base + 2 if base else 0,
                cloud_url=self.cloud_api.base_url(),
                detector=DetectorConfig(),
                window_seconds=max(60, self.scenario.tick_seconds),
                fleet=tuple(self._fleet_entry(spec) for spec in self.scenario.devices),
            )
        )
        self.gateway.start()
        self.command_server.start()
        ports = self.gateway.ports
        sc = self.scenario
        for spec in sorted(sc.devices, key=lambda s: s.descriptor.device_id):
            did = spec.descriptor.device_id
            protocol = spec.descriptor.protocol
            if protocol is Protocol.MQTT:
                link = MqttDeviceLink(sc.home_id, did, sc.auth_token, "127.0.0.1", ports["mqtt"])
            elif protocol is Protocol.COAP:
                link = CoapDeviceLink(sc.home_id, did, "127.0.0.1", ports["coap"])
            else:
                link = HttpDeviceLink(
                    sc.home_id, did, sc.auth_token, "127.0.0.1", ports["http"], self.command_server
                )
            link.connect()
            self.links[did] = link
            entry = self.gateway.fleet[did]
            port = link.port if protocol in (Protocol.COAP, Protocol.HTTP) else 0
            self.gateway.fleet[did] = replace(entry, command_port=port)

    def stop(self, stop_cloud: bool = True) -> None:
        for link in self.links.values():
            link.close()
        self.command_server.stop()
        if self.gateway is not None:
            self.gateway.stop(drain=True)
        if stop_cloud:
            self.cloud_api.stop()
            self.cloud_service.close()
        self._session.close()

    # --- the lockstep loop ------------------------------------------------------

    def _wait(self, predicate, what: str) -> None:
        deadline = time.monotonic() + WAIT_TIMEOUT_S
        while not predicate():
            if time.monotonic() > deadline:
                raise RunnerError(f"timed out waiting for {what}")
            time.sleep(0.002)

    def _post_dr_signals(self, now_ms: int) -> None:
        due = [
            s for s in self.scenario.dr_signals
            if now_ms <= s.to_signal(self.scenario.start_ms).window_start < now_ms + self.scenario.tick_seconds * 1000
        ]
        for spec in due:
            signal = spec.to_signal(self.scenario.start_ms)
            response = self._session.post(
                f"{self.cloud_api.base_url()}/api/v1/homes/{self.scenario.home_id}/dr-signals",
                json={
                    "signal_id": signal.signal_id,
                    "target_reduction_w": signal.target_reduction_w,
                    "window_start": signal.window_start,
                    "window_end": signal.window_end,
                },
                headers={"Authorization": f"Bearer {self.scenario.auth_token}"},
                timeout=5,
            )
            if response.status_code != 201:
                raise RunnerError(f"dr-signal post failed: {response.status_code} {response.text}")
        if due:
            expected = self.gateway.dr_signals_received + len(due)
            self._wait(
                lambda: self.gateway.dr_signals_received >= expected, "DR signal on the downlink"
            )
            self.gateway.wait_idle(WAIT_TIMEOUT_S)

    def run(self, stop_cloud: bool = True) -> dict:
        sc = self.scenario
        self.start()
        try:
            for tick in range(sc.n_ticks):
                now_ms = sc.start_ms + tick * sc.tick_seconds * 1000
                self._post_dr_signals(now_ms)

                for did in sorted(self.links):
                    for cmd in self.links[did].drain_commands():
                        rejection = self.fleet.queue_command(cmd)
                        if rejection is not None:
                            self.links[did].send(rejection)
                            self._emitted_events += 1

                measurements, events = self.fleet.step(tick)
                by_device: Dict[str, list] = {}
                for e in events:
                    by_device.setdefault(e.source, []).append(e)
                for m in measurements:
                    by_device.setdefault(m.device_id, []).append(m)
                    self._power_sums[m.device_id] = self._power_sums.get(m.device_id, 0.0)
                    if m.metric is MetricKind.POWER_W:
                        self._power_sums[m.device_id] += m.value * sc.tick_seconds / 3600.0
                    self._emission_seqs.setdefault(m.device_id, []).append(m.seq)
                self._emitted_measurements += len(measurements)
                self._emitted_events += len(events)

                for did in sorted(by_device):
                    link = self.links[did]
                    for envelope in by_device[did]:
                        link.send(envelope)

                self.gateway.wait_idle(WAIT_TIMEOUT_S)
                self.gateway.on_clock(now_ms + sc.tick_seconds * 1000)
                self.gateway.wait_idle(WAIT_TIMEOUT_S)
                if self.speed == "realtime":
                    time.sleep(sc.tick_seconds)

            if not self.gateway.forwarder.drain(WAIT_TIMEOUT_S):
                raise RunnerError("uplink did not drain after the run")
            return self.build_report()
        finally:
            self.stop(stop_cloud=stop_cloud)

    # --- report ----------------------------------------------------------------

    def _flex_report(self) -> Optional[dict]:
        sc = self.scenario
        if not sc.flex_loads:
            return None
        loads = [
            FlexLoad(l.load_id, l.power_w, l.duration_slots, l.earliest_slot, l.latest_slot)
            for l in sc.flex_loads
        ]
        n_slots = max(l.earliest_slot + l.duration_slots for l in loads)
        n_slots = max(n_slots, max(l.latest_slot + l.duration_slots for l in loads))
        start_hour = (sc.start_ms % 86_400_000) / 3_600_000.0
        prices = tariff_slot_prices(sc.tariff, sc.flex_slot_seconds, n_slots, start_hour)
        _, earliest_cost, earliest_peak = run_at_earliest(loads, prices, sc.flex_slot_seconds)
        try:
            schedule = schedule_flexible_loads(loads, prices, sc.flex_slot_seconds, sc.flex_peak_cap_w)
        except Infeasible as exc:
            return {"error": f"infeasible: {exc.load_id}", "baseline_cost": earliest_cost}
        return {
            "assignments": [list(a) for a in schedule.assignments],
            "slot_seconds": schedule.slot_seconds,
            "total_cost": schedule.total_cost,
            "peak_w": schedule.peak_w,
            "baseline_cost": earliest_cost,
            "baseline_peak_w": earliest_peak,
            "peak_cap_w": sc.flex_peak_cap_w,
        }

    def _detector_report(self) -> dict:
        hits = []
        for event in sorted(self.gateway.anomalies, key=lambda e: (e.timestamp, e.source, e.event_id)):
            hits.append(
                {
                    "detector": event.payload.get("detector"),
                    "device_id": event.source,
                    "metric": event.payload.get("metric"),
                    "timestamp": event.timestamp,
                }
            )
        ground_truth = [
            {
                "device_id": g.device_id,
                "kind": g.kind,
                "onset_ms": g.onset_ms,
                "onset_tick": g.onset_tick,
            }
            for g in self.fleet.fault_log
        ]
        return {"hits": hits, "injected_faults": ground_truth}

    def _invariants(self, stored_keys: int) -> dict:
        checks = {}
        checks["all_emitted_measurements_stored"] = stored_keys == self._emitted_measurements
        order_ok = True
        for did in sorted(self._emission_seqs):
            stored = self.cloud_service.stores.measurements.device_order(did)
            seqs = [seq for _, seq in stored]
            order_ok = order_ok and seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
            expected = self._emission_seqs[did]
            checks.setdefault("per_device_sequences_contiguous", True)
            if expected != list(range(len(expected))):
                checks["per_device_sequences_contiguous"] = False
        checks["per_device_order_preserved_in_cloud"] = order_ok
        energy_ok = True
        for did, final in sorted(self.fleet.states.items()):
            total = self._power_sums.get(did, 0.0)
            reference = abs(total) if total else 1.0
            if abs(final.energy_wh - total) > 1e-9 * reference:
                energy_ok = False
        checks["energy_conservation_1e9"] = energy_ok
        checks["no_buffer_evictions"] = self.gateway.buffer.evicted_total == 0
        return checks

    def build_report(self) -> dict:
        sc = self.scenario
        stores = self.cloud_service.stores
        device_ids = sorted(self.fleet.states)
        stored_keys = sum(
            len(stores.measurements.device_order(did)) for did in device_ids
        )
        events_by_kind: Dict[str, int] = {}
        for kind in EventKind:
            count = len(stores.events.query(kind=kind))
            if count:
                events_by_kind[kind.value] = count
        report = {
            "scenario": sc.name,
            "home_id": sc.home_id,
            "seed": sc.rng_seed,
            "ticks": sc.n_ticks,
            "tick_seconds": sc.tick_seconds,
            "counts": {
                "measurements_emitted": self._emitted_measurements,
                "measurements_delivered": self.gateway.measurements_accepted,
                "measurements_stored": stored_keys,
                "duplicates_dropped_at_gateway": self.gateway.duplicates_dropped,
                "device_events_emitted": self._emitted_events,
                "commands_dispatched": self.gateway.commands_dispatched,
                "events_by_kind": events_by_kind,
            },
            "energy_wh_by_device": {
                did: state.energy_wh for did, state in sorted(self.fleet.states.items())
            },
            "dr_outcomes": [
                {
                    "signal_id": plan.signal_id,
                    "achieved_reduction_w": plan.achieved_reduction_w,
                    "target_met": plan.target_met,
                    "restore_at": plan.restore_at,
                    "devices": [a.device_id for a in plan.actions],
                }
                for plan in self.gateway.plans
            ],
            "flexibility": self._flex_report(),
            "detectors": self._detector_report(),
        }
        report["invariants"] = self._invariants(stored_keys)
        report["ok"] = all(report["invariants"].values())
        return report


def render_report(report: dict) -> str:
    return canonical_json(report)


def summarize_report(report: dict) -> str:
    lines = [
        f"scenario {report['scenario']} (seed {report['seed']}): "
        f"{report['ticks']} ticks x {report['tick_seconds']} s",
        f"  measurements: {report['counts']['measurements_emitted']} emitted, "
        f"{report['counts']['measurements_delivered']} delivered, "
        f"{report['counts']['measurements_stored']} stored",
        f"  commands dispatched: {report['counts']['commands_dispatched']}",
    ]
    for did, wh in report["energy_wh_by_device"].items():
        lines.append(f"  energy {did}: {wh:.1f} Wh")
    for plan in report["dr_outcomes"]:
        status = "met" if plan["target_met"] else "SHORTFALL"
        lines.append(
            f"  dr {plan['signal_id']}: {plan['achieved_reduction_w']:.0f} W ({status}) "
            f"via {', '.join(plan['devices']) or 'nothing'}"
        )
    flex = report.get("flexibility")
    if flex:
        if "error" in flex:
            lines.append(f"  flexibility: {flex['error']}")
        else:
            lines.append(
                f"  flexibility: cost {flex['total_cost']:.4f} vs baseline "
                f"{flex['baseline_cost']:.4f}, peak {flex['peak_w']:.0f} W"
            )
    detectors = report["detectors"]
    lines.append(
        f"  detector hits: {len(detectors['hits'])} "
        f"(injected faults: {len(detectors['injected_faults'])})"
    )
    for name, ok in report["invariants"].items():
        lines.append(f"  invariant {name}: {'ok' if ok else 'VIOLATED'}")
    lines.append(f"  overall: {'ok' if report['ok'] else 'FAILED'}")
    return "\n".join(lines)
