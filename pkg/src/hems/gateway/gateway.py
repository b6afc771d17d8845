"""The home gateway: one process wiring adapters, analytics, and uplink.

Data path: transport listeners normalize frames and hand them to
``_on_frame`` (still on the transport thread), which deduplicates,
appends to the durable forward buffer, and queues for the analytics
worker — only then is the frame acknowledged to the device. The worker
runs detectors, tracks fleet state, executes demand-response plans, and
consumes cloud downlink items (commands to route, DR signals to plan).
The forwarder drains the buffer to the cloud independently, so cloud
outages never stall ingestion.
"""

from __future__ import annotations

import heapq
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import requests

from ..adapters.codec import DeviceRegistry, ProtocolBinding
from ..adapters.hub import DeliveryError, TransportHub
from ..model import (
    ActionKind,
    CommandOrigin,
    ControlCommand,
    DrSignal,
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Protocol,
    Severity,
    dedup_key,
)
from ..wire import WireError, decode_envelope, encode_envelope
from .aggregate import AggregateRecord, aggregate_window
from .anomaly import AnomalyDetector, DetectorConfig
from .buffer import ForwardBuffer
from .curtail import CurtailableDevice, CurtailmentPlan, plan_curtailment
from .forwarder import Forwarder

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FleetEntry:
    """What the gateway knows about one device, from its config."""

    device_id: str
    protocol: Protocol
    room: str = ""
    command_host: str = "127.0.0.1"
    command_port: int = 0
    initial_switch_on: bool = True
    rank: int = 1
    curtailable: bool = False
    has_charge_rate: bool = False
    max_rate_w: float = 0.0
    v2g_discharge_w: float = 0.0
    default_charge_rate_w: float = 0.0
    tags: tuple = ()


@dataclass
class GatewayConfig:
    home_id: str
    token: str
    buffer_path: str
    host: str = "127.0.0.1"
    mqtt_port: int = 0
    coap_port: int = 0
    http_port: int = 0
    cloud_url: str = ""
    buffer_capacity: int = 10_000
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    auto_mitigate: bool = True
    window_seconds: int = 60
    charge_on_export: bool = True
    poll_wait_ms: int = 300
    fleet: tuple = ()


class HomeGateway:
    def __init__(self, config: GatewayConfig):
        self.config = config
        self.registry = DeviceRegistry()
        self.fleet: Dict[str, FleetEntry] = {}
        for entry in config.fleet:
            self.registry.register(config.home_id, entry.device_id, entry.protocol)
            self.fleet[entry.device_id] = entry

        self.buffer = ForwardBuffer(config.buffer_path, config.buffer_capacity)
        self.hub = TransportHub(
            config.home_id,
            config.token,
            self.registry,
            sink=self._on_frame,
            host=config.host,
            mqtt_port=config.mqtt_port,
            coap_port=config.coap_port,
            http_port=config.http_port,
            on_adapter_event=self._record_event,
        )
        self.forwarder: Optional[Forwarder] = None
        if config.cloud_url:
            self.forwarder = Forwarder(
                self.buffer, config.cloud_url, config.token, on_drop=self._on_uplink_drop
            )

        self.detector = AnomalyDetector(config.detector, switch_state=self.switch_state)
        self._switch: Dict[str, bool] = {
            d: e.initial_switch_on for d, e in self.fleet.items()
        }
        self._charge_rate: Dict[str, float] = {
            d: e.default_charge_rate_w for d, e in self.fleet.items() if e.has_charge_rate
        }
        self._last_power: Dict[str, float] = {}
        self._last_seq: Dict[Tuple[str, int], int] = {}

        self._queue: "queue.Queue[tuple]" = queue.Queue()
        self._ingest_lock = threading.Lock()
        self._idle = threading.Condition()
        self._enqueued = 0
        self._processed = 0
        self._worker: Optional[threading.Thread] = None
        self._poller: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._halted = False
        self._cursor = 0

        self._restores: List[Tuple[int, int, ControlCommand]] = []  # (due_ms, tie, cmd)
        self._restore_tie = 0
        self._export_windows: Dict[int, Dict[int, float]] = {}
        self._export_active = False

        # run products, for reports and tests
        self.measurements: List[Measurement] = []
        self.events: List[Event] = []
        self.anomalies: List[Event] = []
        self.plans: List[CurtailmentPlan] = []
        self.measurements_accepted = 0
        self.duplicates_dropped = 0
        self.events_accepted = 0
        self.downlink_received = 0
        self.dr_signals_received = 0
        self.commands_dispatched = 0

    # --- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self.hub.start()
        self._stop.clear()
        self._worker = threading.Thread(target=self._work_loop, name="gateway-worker", daemon=True)
        self._worker.start()
        if self.forwarder:
            self.forwarder.start()
        if self.config.cloud_url:
            self._poller = threading.Thread(target=self._poll_loop, name="gateway-poll", daemon=True)
            self._poller.start()

    def stop(self, drain: bool = True, timeout: float = 30.0) -> None:
        if drain:
            self.wait_idle(timeout)
            if self.forwarder:
                self.forwarder.drain(timeout)
        self._halted = True
        self._stop.set()
        if self._poller:
            self._poller.join(timeout=5)
        if self.forwarder:
            self.forwarder.stop()
        self.hub.stop()
        self._queue.put(("halt", None))
        if self._worker:
            self._worker.join(timeout=5)
        self.buffer.close()

    @property
    def ports(self) -> Dict[str, int]:
        return self.hub.ports

    def switch_state(self, device_id: str) -> Optional[bool]:
        return self._switch.get(device_id)

    def wait_idle(self, timeout: float = 30.0) -> bool:
        """Block until every queued item has been fully processed."""
        with self._idle:
            return self._idle.wait_for(lambda: self._processed == self._enqueued, timeout)

    # --- ingestion (transport threads) --------------------------------------

    def _enqueue(self, item: tuple) -> None:
        with self._idle:
            self._enqueued += 1
        self._queue.put(item)

    def _on_frame(self, envelope) -> None:
        if self._halted:
            # A replaced gateway instance must never ack a frame: failing the
            # request makes the device retry against the live instance.
            raise RuntimeError("gateway is stopped")
        with self._ingest_lock:
            if isinstance(envelope, Measurement):
                key = (envelope.device_id, envelope.seq_epoch)
                last = self._last_seq.get(key)
                if last is not None and envelope.seq <= last:
                    self.duplicates_dropped += 1
                    return
                # buffer first: the seq is only recorded once the frame is
                # durable, so a failed append is retried, not deduplicated away
                self.buffer_append(envelope)
                self._last_seq[key] = envelope.seq
                self.measurements_accepted += 1
            else:
                self.buffer_append(envelope)
                self.events_accepted += 1
        self._enqueue(("frame", envelope))

    def buffer_append(self, envelope) -> None:
        evicted = self.buffer.append(encode_envelope(envelope))
        if evicted:
            overflow = Event(
                event_id=f"overflow-{int(time.time() * 1000)}-{self.buffer.evicted_total}",
                kind=EventKind.SYSTEM_ALERT,
                severity=Severity.CRITICAL,
                source="gateway",
                timestamp=int(time.time() * 1000),
                payload={"evicted": evicted, "capacity": self.buffer.capacity},
            )
            self.events.append(overflow)
            self.buffer.append(encode_envelope(overflow))

    def _record_event(self, event: Event) -> None:
        """Gateway-originated event: log locally and forward to the cloud."""
        self.events.append(event)
        self.buffer_append(event)

    def _on_uplink_drop(self, count: int, reason: str) -> None:
        self._record_event(
            Event(
                event_id=f"uplink-drop-{int(time.time() * 1000)}",
                kind=EventKind.SYSTEM_ALERT,
                severity=Severity.CRITICAL,
                source="gateway",
                timestamp=int(time.time() * 1000),
                payload={"dropped": count, "reason": reason[:200]},
            )
        )

    # --- cloud downlink ------------------------------------------------------

    def _poll_loop(self) -> None:
        session = requests.Session()
        url = f"{self.config.cloud_url.rstrip('/')}/api/v1/homes/{self.config.home_id}/commands"
        while not self._stop.is_set():
            try:
                response = session.get(
                    url,
                    params={"cursor": self._cursor, "wait_ms": self.config.poll_wait_ms},
                    headers={"Authorization": f"Bearer {self.config.token}"},
                    timeout=5.0,
                )
            except requests.RequestException:
                self._stop.wait(0.2)
                continue
            if response.status_code != 200:
                self._stop.wait(0.2)
                continue
            data = response.json()
            items = data.get("items", [])
            self._cursor = int(data.get("cursor", self._cursor))
            for raw in items:
                try:
                    envelope = decode_envelope(raw)
                except WireError as exc:
                    logger.error("gateway: bad downlink item: %s", exc)
                    continue
                self.downlink_received += 1
                if isinstance(envelope, Event) and envelope.kind is EventKind.DR_SIGNAL:
                    self.dr_signals_received += 1
                self._enqueue(("downlink", envelope))
        session.close()

    # --- clock (driven by the runner in simulation, by wall time live) -------

    def on_clock(self, now_ms: int) -> None:
        self._enqueue(("clock", now_ms))

    # --- worker --------------------------------------------------------------

    def _work_loop(self) -> None:
        while True:
            kind, payload = self._queue.get()
            try:
                if kind == "halt":
                    return
                if kind == "frame":
                    self._process_frame(payload)
                elif kind == "downlink":
                    self._process_downlink(payload)
                elif kind == "clock":
                    self._process_clock(payload)
            except Exception:  # noqa: BLE001 - the pipeline must survive bad items
                logger.exception("gateway worker: failed to process %s item", kind)
            finally:
                with self._idle:
                    self._processed += 1
                    self._idle.notify_all()

    def _process_frame(self, envelope) -> None:
        if isinstance(envelope, Measurement):
            self.measurements.append(envelope)
            if envelope.metric is MetricKind.POWER_W:
                self._last_power[envelope.device_id] = envelope.value
                self._track_export(envelope)
            for anomaly in self.detector.observe(envelope):
                self.anomalies.append(anomaly)
                self._record_event(anomaly)
                self._maybe_mitigate(anomaly)
        elif isinstance(envelope, Event):
            self.events.append(envelope)
            if envelope.kind is EventKind.COMMAND_APPLIED:
                self._apply_state_update(envelope)

    def _apply_state_update(self, event: Event) -> None:
        device_id = event.source
        switch_on = event.payload.get("switch_on")
        if isinstance(switch_on, bool):
            self._switch[device_id] = switch_on
        if event.payload.get("action") == ActionKind.SET_CHARGE_RATE_W.value:
            arg = event.payload.get("arg")
            if isinstance(arg, (int, float)):
                self._charge_rate[device_id] = float(arg)

    def _maybe_mitigate(self, anomaly: Event) -> None:
        if not self.config.auto_mitigate:
            return
        if anomaly.payload.get("detector") != "phantom_load":
            return
        device_id = anomaly.source
        cmd = ControlCommand(
            command_id=f"mitigate-{device_id}-{anomaly.timestamp}",
            device_id=device_id,
            action=ActionKind.SWITCH_OFF,
            origin=CommandOrigin.EDGE,
            issued_at=anomaly.timestamp,
        )
        self.dispatch_command(cmd, note="auto_mitigate phantom_load")

    def _process_downlink(self, envelope) -> None:
        if isinstance(envelope, ControlCommand):
            self.dispatch_command(envelope, note="cloud downlink")
        elif isinstance(envelope, Event) and envelope.kind is EventKind.DR_SIGNAL:
            self._handle_dr_signal(envelope)
        else:
            logger.warning("gateway: ignoring downlink %r", envelope)

    def _handle_dr_signal(self, event: Event) -> None:
        payload = event.payload
        try:
            signal = DrSignal(
                signal_id=str(payload["signal_id"]),
                target_reduction_w=float(payload["target_reduction_w"]),
                window_start=int(payload["window_start"]),
                window_end=int(payload["window_end"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            logger.error("gateway: malformed dr_signal event: %s", exc)
            return
        snapshot = self._curtailment_snapshot()
        plan, warning = plan_curtailment(signal, snapshot, now_ms=event.timestamp)
        self.plans.append(plan)
        restores: List[ControlCommand] = []
        for action in plan.actions:
            restores.append(self._restore_command(action.command, plan.restore_at))
            self.dispatch_command(action.command, note=f"curtail {signal.signal_id}")
        for cmd in restores:
            self._restore_tie += 1
            heapq.heappush(self._restores, (plan.restore_at, self._restore_tie, cmd))
        self._record_event(
            Event(
                event_id=f"plan-{signal.signal_id}",
                kind=EventKind.DR_SIGNAL,
                severity=Severity.INFO,
                source="gateway",
                timestamp=event.timestamp,
                payload={
                    "signal_id": signal.signal_id,
                    "target_reduction_w": signal.target_reduction_w,
                    "achieved_reduction_w": plan.achieved_reduction_w,
                    "target_met": plan.target_met,
                    "restore_at": plan.restore_at,
                    "actions": [
                        {
                            "device_id": a.device_id,
                            "action": a.command.action.value,
                            "arg": a.command.arg,
                            "expected_reduction_w": a.expected_reduction_w,
                        }
                        for a in plan.actions
                    ],
                },
            )
        )
        if warning is not None:
            self._record_event(warning)

    def _curtailment_snapshot(self) -> List[CurtailableDevice]:
        snapshot = []
        for device_id, entry in sorted(self.fleet.items()):
            if not entry.curtailable:
                continue
            v2g = entry.v2g_discharge_w
            snapshot.append(
                CurtailableDevice(
                    device_id=device_id,
                    power_w=self._last_power.get(device_id, 0.0),
                    rank=entry.rank,
                    can_switch_off=True,
                    has_charge_rate=entry.has_charge_rate,
                    v2g_discharge_w=v2g,
                )
            )
        return snapshot

    def _restore_command(self, curtail_cmd: ControlCommand, restore_at: int) -> ControlCommand:
        if curtail_cmd.action is ActionKind.SET_CHARGE_RATE_W:
            previous = self._charge_rate.get(curtail_cmd.device_id, 0.0)
            action, arg = ActionKind.SET_CHARGE_RATE_W, previous
        else:
            action, arg = ActionKind.SWITCH_ON, None
        return ControlCommand(
            command_id=f"restore-{curtail_cmd.command_id}",
            device_id=curtail_cmd.device_id,
            action=action,
            origin=CommandOrigin.EDGE,
            issued_at=restore_at,
            arg=arg,
        )

    def _process_clock(self, now_ms: int) -> None:
        while self._restores and self._restores[0][0] <= now_ms:
            _, _, cmd = heapq.heappop(self._restores)
            self.dispatch_command(cmd, note="dr restore")
        self._evaluate_export_windows(now_ms)

    # --- command routing (the Event Consumer's dispatch leg) -----------------

    def dispatch_command(self, cmd: ControlCommand, note: str = "") -> bool:
        entry = self.fleet.get(cmd.device_id)
        if entry is None:
            self._record_event(
                Event(
                    event_id=f"unroutable-{cmd.command_id}",
                    kind=EventKind.SYSTEM_ALERT,
                    severity=Severity.WARNING,
                    source="gateway",
                    timestamp=cmd.issued_at,
                    payload={"command_id": cmd.command_id, "device_id": cmd.device_id,
                             "reason": "unknown device"},
                )
            )
            return False
        binding = ProtocolBinding(
            protocol=entry.protocol,
            home_id=self.config.home_id,
            device_id=cmd.device_id,
            host=entry.command_host,
            port=entry.command_port,
        )
        try:
            self.hub.send_command(cmd, binding)
        except Exception as exc:  # noqa: BLE001 - DeliveryError or transport failure
            self._record_event(
                Event(
                    event_id=f"undelivered-{cmd.command_id}",
                    kind=EventKind.SYSTEM_ALERT,
                    severity=Severity.WARNING,
                    source="gateway",
                    timestamp=cmd.issued_at,
                    payload={"command_id": cmd.command_id, "device_id": cmd.device_id,
                             "reason": str(exc)[:200]},
                )
            )
            return False
        self.commands_dispatched += 1
        self._record_event(
            Event(
                event_id=f"dispatch-{cmd.command_id}",
                kind=EventKind.COMMAND_ISSUED,
                severity=Severity.INFO,
                source="gateway",
                timestamp=cmd.issued_at,
                payload={
                    "command_id": cmd.command_id,
                    "device_id": cmd.device_id,
                    "action": cmd.action.value,
                    "arg": cmd.arg,
                    "origin": cmd.origin.value,
                    "note": note,
                },
            )
        )
        return True

    # --- excess-export rule ---------------------------------------------------

    def _track_export(self, m: Measurement) -> None:
        if not self.config.charge_on_export:
            return
        window_ms = self.config.window_seconds * 1000
        idx = m.timestamp // window_ms
        bucket = self._export_windows.setdefault(idx, {})
        bucket[m.timestamp] = bucket.get(m.timestamp, 0.0) + m.value

    def _evaluate_export_windows(self, now_ms: int) -> None:
        if not self.config.charge_on_export:
            return
        window_ms = self.config.window_seconds * 1000
        batteries = [d for d, e in sorted(self.fleet.items()) if e.has_charge_rate]
        for idx in sorted(list(self._export_windows)):
            if (idx + 1) * window_ms > now_ms:
                continue
            bucket = self._export_windows.pop(idx)
            if not bucket:
                continue
            mean_net = math.fsum(bucket.values()) / len(bucket)
            if mean_net >= 0.0:
                self._export_active = False
                continue
            if self._export_active or not batteries:
                continue
            self._export_active = True
            target = batteries[0]
            entry = self.fleet[target]
            cmd = ControlCommand(
                command_id=f"store-excess-{target}-{(idx + 1) * window_ms}",
                device_id=target,
                action=ActionKind.SET_CHARGE_RATE_W,
                origin=CommandOrigin.EDGE,
                issued_at=(idx + 1) * window_ms,
                arg=entry.max_rate_w,
            )
            self.dispatch_command(cmd, note=f"storing excess export ({mean_net:.0f} W net)")

    # --- final products --------------------------------------------------------

    def final_aggregates(self) -> List[AggregateRecord]:
        return aggregate_window(self.measurements, self.config.window_seconds, self.config.home_id)
