"""Transport hub and device links: live sockets on both ends of the bridge.

The hub is the gateway's listening side: embedded MQTT broker, CoAP
endpoint, and HTTP ingest listener all normalize inbound frames through
:func:`hems.adapters.codec.ingest` into one sink, and commands fan out
through :meth:`TransportHub.send_command` over whichever protocol the
target device is bound to. Acknowledgements happen only after the sink
has accepted a frame, so an acked frame is never lost by a gateway
restart.

Device links are the fleet's sending side. ``send`` blocks until the
transport acknowledges and retries through outages, giving at-least-once
delivery in per-device order; the gateway deduplicates by sequence
number.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from typing import Callable, Dict, List, Optional, Tuple

import requests

from ..model import ControlCommand, Event, Measurement, Protocol, Severity, EventKind
from . import coap as coap_mod
from .codec import (
    AdapterError,
    DeviceRegistry,
    MalformedPayload,
    ProtocolBinding,
    RawFrame,
    UnknownDevice,
    command_route,
    decode_command_frame,
    emit_command,
    encode_device_event,
    encode_telemetry,
    ingest,
    telemetry_route,
)
from .http_transport import DeviceCommandServer, HttpIngestListener
from .mqtt import MqttBroker, MqttClient, MqttError

logger = logging.getLogger(__name__)


class DeliveryError(Exception):
    """Command could not be handed to the device over its transport."""


class LinkClosed(Exception):
    pass


class TransportHub:
    """serve_transports: all three listeners feeding one canonical sink."""

    def __init__(
        self,
        home_id: str,
        token: str,
        registry: DeviceRegistry,
        sink: Callable[[object], None],
        host: str = "127.0.0.1",
        mqtt_port: int = 0,
        coap_port: int = 0,
        http_port: int = 0,
        on_adapter_event: Optional[Callable[[Event], None]] = None,
    ):
        self.home_id = home_id
        self.token = token
        self.registry = registry
        self.sink = sink
        self.on_adapter_event = on_adapter_event or (lambda event: None)
        self.host = host
        self.broker = MqttBroker(
            host, mqtt_port, authenticate=lambda user, pw: user == home_id and pw == token
        )
        self.coap = coap_mod.CoapEndpoint(host, coap_port, handler=self._coap_handler)
        self.http = HttpIngestListener(
            host,
            http_port,
            sink=self._http_sink,
            check_token=lambda home, tok: home == home_id and tok == token,
        )
        self.broker.add_local_handler("hems/+/+/tel/+", self._mqtt_handler)

    @property
    def ports(self) -> Dict[str, int]:
        return {"mqtt": self.broker.port, "coap": self.coap.port, "http": self.http.port}

    def start(self) -> None:
        self.broker.start()
        self.coap.start()
        self.http.start()

    def stop(self) -> None:
        self.broker.stop()
        self.coap.stop()
        self.http.stop()

    # --- inbound ---------------------------------------------------------

    def _accept(self, frame: RawFrame) -> Optional[str]:
        """Normalize and hand to the sink; returns an error marker on failure."""
        try:
            envelope = ingest(frame, self.registry)
        except UnknownDevice as exc:
            self._adapter_event("unknown_device", frame, str(exc))
            return "unknown_device"
        except MalformedPayload as exc:
            self._adapter_event("malformed_payload", frame, str(exc))
            return str(exc)
        self.sink(envelope)
        return None

    def _adapter_event(self, code: str, frame: RawFrame, detail: str) -> None:
        event = Event(
            event_id=f"adapter-{frame.protocol.value}-{frame.received_at}-{abs(hash((frame.route, detail))) % 10**8}",
            kind=EventKind.SYSTEM_ALERT,
            severity=Severity.WARNING,
            source=f"adapter:{frame.protocol.value}",
            timestamp=frame.received_at,
            payload={"code": code, "route": frame.route, "detail": detail},
        )
        try:
            self.on_adapter_event(event)
        except Exception:  # noqa: BLE001
            logger.exception("adapter event callback failed")

    def _mqtt_handler(self, topic: str, payload: bytes) -> None:
        frame = RawFrame(Protocol.MQTT, topic, payload, received_at=int(time.time() * 1000))
        self._accept(frame)

    def _coap_handler(self, method: str, path: str, payload: bytes) -> Tuple[int, bytes]:
        if method != "PUT" or not path.startswith("/tel/"):
            return coap_mod.NOT_FOUND, b""
        frame = RawFrame(Protocol.COAP, path, payload, received_at=int(time.time() * 1000))
        problem = self._accept(frame)
        if problem == "unknown_device":
            return coap_mod.NOT_FOUND, b""
        if problem is not None:
            return coap_mod.BAD_REQUEST, problem.encode()
        return coap_mod.CHANGED, b""

    def _http_sink(self, frame: RawFrame) -> Optional[str]:
        return self._accept(frame)

    # --- outbound --------------------------------------------------------

    def send_command(self, cmd: ControlCommand, binding: ProtocolBinding, timeout: float = 5.0) -> None:
        """Deliver a command frame; blocks until the device acknowledged it."""
        frame = emit_command(cmd, binding)
        if binding.protocol is Protocol.MQTT:
            try:
                delivered = self.broker.publish(frame.route, frame.payload, wait_acks=True, timeout=timeout)
            except MqttError as exc:
                raise DeliveryError(str(exc)) from None
            if not delivered:
                raise DeliveryError(f"{binding.device_id}: no subscriber on {frame.route}")
            return
        if binding.protocol is Protocol.COAP:
            try:
                code, _ = self.coap.request(
                    (binding.host, binding.port), coap_mod.POST, frame.route, frame.payload, timeout=timeout
                )
            except coap_mod.CoapTimeout as exc:
                raise DeliveryError(str(exc)) from None
            if code != coap_mod.CHANGED:
                raise DeliveryError(f"{binding.device_id}: CoAP command rejected with {code >> 5}.{code & 31:02d}")
            return
        url = f"http://{binding.host}:{binding.port}{frame.route}"
        try:
            response = requests.post(url, data=frame.payload, timeout=timeout)
        except requests.RequestException as exc:
            raise DeliveryError(f"{binding.device_id}: {exc}") from None
        if response.status_code != 200:
            raise DeliveryError(f"{binding.device_id}: HTTP {response.status_code}")


# --- device side -----------------------------------------------------------


class _CommandInbox:
    def __init__(self) -> None:
        self._q: "queue.Queue[ControlCommand]" = queue.Queue()
        self.received = 0

    def push(self, raw: bytes, protocol: Protocol, route: str) -> bool:
        try:
            cmd = decode_command_frame(RawFrame(protocol, route, raw))
        except MalformedPayload as exc:
            logger.warning("device link: dropping bad command frame: %s", exc)
            return False
        self._q.put(cmd)
        self.received += 1
        return True

    def drain(self) -> List[ControlCommand]:
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out


class DeviceLink:
    """Base: blocking at-least-once send plus a command inbox."""

    def __init__(self, home_id: str, device_id: str):
        self.home_id = home_id
        self.device_id = device_id
        self.inbox = _CommandInbox()
        self._closed = False

    def encode(self, envelope) -> Tuple[str, bytes]:
        if isinstance(envelope, Measurement):
            segment = envelope.metric.value
            payload = encode_telemetry(envelope)
        elif isinstance(envelope, Event):
            segment = "event"
            payload = encode_device_event(envelope)
        else:
            raise TypeError(f"device link cannot send {type(envelope).__name__}")
        return segment, payload

    def drain_commands(self) -> List[ControlCommand]:
        return self.inbox.drain()

    def close(self) -> None:
        self._closed = True

    def _retry(self, attempt: Callable[[], None], what: str) -> None:
        backoff = 0.02
        while True:
            if self._closed:
                raise LinkClosed(what)
            try:
                attempt()
                return
            except LinkClosed:
                raise
            except Exception as exc:  # noqa: BLE001 - transient transport errors
                logger.debug("%s: retrying %s after %s", self.device_id, what, exc)
                time.sleep(backoff)
                backoff = min(0.25, backoff * 2)


class MqttDeviceLink(DeviceLink):
    def __init__(self, home_id: str, device_id: str, token: str, host: str, port: int):
        super().__init__(home_id, device_id)
        self.token = token
        self.host = host
        self.port = port
        self._client: Optional[MqttClient] = None
        self._lock = threading.Lock()

    def connect(self) -> None:
        client = MqttClient(
            self.host,
            self.port,
            client_id=self.device_id,
            username=self.home_id,
            password=self.token,
            on_message=self._on_message,
        )
        client.connect()
        client.subscribe([command_route(Protocol.MQTT, self.home_id, self.device_id)])
        self._client = client

    def _on_message(self, topic: str, payload: bytes) -> None:
        self.inbox.push(payload, Protocol.MQTT, topic)

    def _ensure_connected(self) -> None:
        if self._client is None or not self._client.connected:
            self.connect()

    def send(self, envelope) -> None:
        segment, payload = self.encode(envelope)
        topic = telemetry_route(Protocol.MQTT, self.home_id, self.device_id, segment)

        def attempt():
            with self._lock:
                self._ensure_connected()
                self._client.publish(topic, payload, qos=1)

        self._retry(attempt, f"publish {topic}")

    def close(self) -> None:
        super().close()
        if self._client:
            self._client.close()


class CoapDeviceLink(DeviceLink):
    """Owns a UDP endpoint: telemetry client and command server in one."""

    def __init__(self, home_id: str, device_id: str, gateway_host: str, gateway_port: int,
                 listen_host: str = "127.0.0.1", listen_port: int = 0):
        super().__init__(home_id, device_id)
        self.gateway = (gateway_host, gateway_port)
        self.endpoint = coap_mod.CoapEndpoint(listen_host, listen_port, handler=self._handler)

    @property
    def port(self) -> int:
        return self.endpoint.port

    def connect(self) -> None:
        self.endpoint.start()

    def _handler(self, method: str, path: str, payload: bytes) -> Tuple[int, bytes]:
        expected = command_route(Protocol.COAP, self.home_id, self.device_id)
        if method != "POST" or path != expected:
            return coap_mod.NOT_FOUND, b""
        if not self.inbox.push(payload, Protocol.COAP, path):
            return coap_mod.BAD_REQUEST, b""
        return coap_mod.CHANGED, b""

    def send(self, envelope) -> None:
        segment, payload = self.encode(envelope)
        path = telemetry_route(Protocol.COAP, self.home_id, self.device_id, segment)

        def attempt():
            code, body = self.endpoint.request(self.gateway, coap_mod.PUT, path, payload, timeout=2.0)
            if code != coap_mod.CHANGED:
                # Non-2.04 is a terminal verdict from the gateway, not a transport
                # failure; surface it rather than retrying forever.
                raise LinkClosed(f"gateway rejected {path}: {code >> 5}.{code & 31:02d} {body!r}")

        self._retry(attempt, f"PUT {path}")

    def close(self) -> None:
        super().close()
        self.endpoint.stop()


class HttpDeviceLink(DeviceLink):
    def __init__(self, home_id: str, device_id: str, token: str, gateway_host: str, gateway_port: int,
                 command_server: "SharedCommandServer"):
        super().__init__(home_id, device_id)
        self.token = token
        self.base = f"http://{gateway_host}:{gateway_port}"
        self.session = requests.Session()
        command_server.attach(home_id, device_id, self.inbox)
        self._command_server = command_server

    @property
    def port(self) -> int:
        return self._command_server.port

    def connect(self) -> None:
        pass  # stateless; the shared command server is managed by the fleet

    def send(self, envelope) -> None:
        segment, payload = self.encode(envelope)
        url = self.base + telemetry_route(Protocol.HTTP, self.home_id, self.device_id, segment)

        def attempt():
            response = self.session.post(
                url,
                data=payload,
                headers={"Authorization": f"Bearer {self.token}"},
                timeout=2.0,
            )
            if response.status_code in (400, 404):
                raise LinkClosed(f"gateway rejected {url}: {response.status_code} {response.text}")
            if response.status_code != 200:
                raise IOError(f"HTTP {response.status_code}")

        self._retry(attempt, f"POST {url}")

    def close(self) -> None:
        super().close()
        self.session.close()


class SharedCommandServer:
    """One HTTP command listener shared by all HTTP devices in a process."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._inboxes: Dict[Tuple[str, str], _CommandInbox] = {}
        self.server = DeviceCommandServer(host, port, dispatch=self._dispatch)

    def attach(self, home_id: str, device_id: str, inbox: _CommandInbox) -> None:
        self._inboxes[(home_id, device_id)] = inbox

    def _dispatch(self, home: str, device: str, raw: bytes) -> bool:
        inbox = self._inboxes.get((home, device))
        if inbox is None:
            return False
        return inbox.push(raw, Protocol.HTTP, command_route(Protocol.HTTP, home, device))

    @property
    def port(self) -> int:
        return self.server.port

    def start(self) -> None:
        self.server.start()

    def stop(self) -> None:
        self.server.stop()
