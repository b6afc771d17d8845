"""Embedded MQTT 3.1.1 broker and client: the subset the stack needs.

Supported: CONNECT with username/password, SUBSCRIBE with single-level
``+`` wildcards, PUBLISH at QoS 0 and 1 with PUBACK, retransmission with
the DUP flag, receiver-side packet-id deduplication, PINGREQ/PINGRESP,
DISCONNECT. Not supported (rejected or ignored): QoS 2, retained
messages, ``#`` wildcards, persistent sessions, wills.

The broker delivers inbound publishes to registered local handlers
*before* acknowledging, so an acked telemetry frame is already in the
gateway's hands.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from typing import Callable, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

CONNECT, CONNACK, PUBLISH, PUBACK = 1, 2, 3, 4
SUBSCRIBE, SUBACK = 8, 9
PINGREQ, PINGRESP, DISCONNECT = 12, 13, 14

RETRANSMIT_AFTER_S = 0.5
MAX_PACKET_ID = 65535


class MqttError(Exception):
    pass


def _encode_length(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _encode_string(s: str) -> bytes:
    data = s.encode("utf-8")
    return struct.pack("!H", len(data)) + data


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return buf


def _read_packet(sock: socket.socket) -> Tuple[int, int, bytes]:
    """Read one packet; returns (type, flags, body)."""
    first = _recv_exact(sock, 1)[0]
    length = 0
    shift = 0
    for _ in range(4):
        byte = _recv_exact(sock, 1)[0]
        length |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
    else:
        raise MqttError("malformed remaining length")
    body = _recv_exact(sock, length) if length else b""
    return first >> 4, first & 0x0F, body


def _parse_string(body: bytes, offset: int) -> Tuple[str, int]:
    (n,) = struct.unpack_from("!H", body, offset)
    end = offset + 2 + n
    return body[offset + 2 : end].decode("utf-8"), end


def topic_matches(filter_: str, topic: str) -> bool:
    """Single-level ``+`` wildcard matching; no multi-level wildcard."""
    fparts = filter_.split("/")
    tparts = topic.split("/")
    if len(fparts) != len(tparts):
        return False
    return all(f == "+" or f == t for f, t in zip(fparts, tparts))


def encode_publish(topic: str, payload: bytes, qos: int, packet_id: int = 0, dup: bool = False) -> bytes:
    flags = (0x08 if dup else 0) | (qos << 1)
    body = _encode_string(topic)
    if qos > 0:
        body += struct.pack("!H", packet_id)
    body += payload
    return bytes([(PUBLISH << 4) | flags]) + _encode_length(len(body)) + body


def encode_puback(packet_id: int) -> bytes:
    return bytes([PUBACK << 4, 2]) + struct.pack("!H", packet_id)


class _PacketIds:
    def __init__(self) -> None:
        self._next = 1
        self._lock = threading.Lock()

    def take(self) -> int:
        with self._lock:
            pid = self._next
            self._next = self._next % MAX_PACKET_ID + 1
            return pid


class _InFlight:
    """QoS 1 messages awaiting PUBACK, with DUP retransmission."""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.entries: Dict[int, dict] = {}

    def add(self, pid: int, topic: str, payload: bytes) -> threading.Event:
        done = threading.Event()
        with self.lock:
            self.entries[pid] = {
                "topic": topic,
                "payload": payload,
                "deadline": time.monotonic() + RETRANSMIT_AFTER_S,
                "done": done,
            }
        return done

    def ack(self, pid: int) -> None:
        with self.lock:
            entry = self.entries.pop(pid, None)
        if entry:
            entry["done"].set()

    def due(self) -> List[Tuple[int, str, bytes]]:
        now = time.monotonic()
        out = []
        with self.lock:
            for pid, entry in self.entries.items():
                if entry["deadline"] <= now:
                    entry["deadline"] = now + RETRANSMIT_AFTER_S
                    out.append((pid, entry["topic"], entry["payload"]))
        return out

    def clear(self) -> None:
        with self.lock:
            entries, self.entries = self.entries, {}
        for entry in entries.values():
            entry["done"].set()


class _Inbound:
    """Dedup of inbound QoS 1 publishes: a DUP retransmit of an already
    acknowledged packet id is acked again but not re-delivered."""

    def __init__(self) -> None:
        self._acked: Dict[int, None] = {}

    def is_duplicate(self, pid: int, dup: bool) -> bool:
        return dup and pid in self._acked

    def record(self, pid: int) -> None:
        self._acked[pid] = None
        if len(self._acked) > 1024:
            oldest = next(iter(self._acked))
            del self._acked[oldest]


class _BrokerSession:
    def __init__(self, broker: "MqttBroker", sock: socket.socket, peer) -> None:
        self.broker = broker
        self.sock = sock
        self.peer = peer
        self.client_id = ""
        self.subscriptions: List[Tuple[str, int]] = []
        self.write_lock = threading.Lock()
        self.in_flight = _InFlight()
        self.inbound = _Inbound()
        self.pids = _PacketIds()
        self.alive = True

    def send(self, data: bytes) -> None:
        with self.write_lock:
            self.sock.sendall(data)

    def deliver(self, topic: str, payload: bytes, qos: int) -> Optional[threading.Event]:
        """Queue one message toward this client; returns the ack event for QoS 1."""
        if qos == 0:
            self.send(encode_publish(topic, payload, 0))
            return None
        pid = self.pids.take()
        done = self.in_flight.add(pid, topic, payload)
        self.send(encode_publish(topic, payload, 1, pid))
        return done

    def subscribed_qos(self, topic: str) -> Optional[int]:
        best = None
        for filter_, qos in self.subscriptions:
            if topic_matches(filter_, topic):
                best = qos if best is None else max(best, qos)
        return best

    def close(self) -> None:
        self.alive = False
        self.in_flight.clear()
        try:
            self.sock.close()
        except OSError:
            pass


class MqttBroker:
    """Minimal broker embedded in the gateway process."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 1883,
        authenticate: Optional[Callable[[str, str], bool]] = None,
    ) -> None:
        self.host = host
        self.port = port
        self.authenticate = authenticate
        self._server: Optional[socket.socket] = None
        self._sessions: List[_BrokerSession] = []
        self._sessions_lock = threading.Lock()
        self._local_handlers: List[Tuple[str, Callable[[str, bytes], None]]] = []
        self._threads: List[threading.Thread] = []
        self._running = False

    def add_local_handler(self, filter_: str, handler: Callable[[str, bytes], None]) -> None:
        """In-process subscriber; runs before the publisher gets its PUBACK."""
        self._local_handlers.append((filter_, handler))

    def start(self) -> None:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            server.bind((self.host, self.port))
        except OSError as exc:
            server.close()
            raise MqttError(f"cannot bind MQTT broker to {self.host}:{self.port}: {exc}") from None
        server.listen(32)
        self.port = server.getsockname()[1]
        self._server = server
        self._running = True
        accept = threading.Thread(target=self._accept_loop, name="mqtt-accept", daemon=True)
        retransmit = threading.Thread(target=self._retransmit_loop, name="mqtt-retx", daemon=True)
        accept.start()
        retransmit.start()
        self._threads = [accept, retransmit]

    def stop(self) -> None:
        self._running = False
        if self._server:
            try:
                self._server.shutdown(socket.SHUT_RDWR)  # wakes the blocked accept()
            except OSError:
                pass
            try:
                self._server.close()
            except OSError:
                pass
        with self._sessions_lock:
            sessions = list(self._sessions)
        for session in sessions:
            session.close()
        for t in self._threads:
            t.join(timeout=2)

    def _accept_loop(self) -> None:
        while self._running:
            try:
                sock, peer = self._server.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = _BrokerSession(self, sock, peer)
            with self._sessions_lock:
                self._sessions.append(session)
            threading.Thread(
                target=self._session_loop, args=(session,), name=f"mqtt-conn-{peer[1]}", daemon=True
            ).start()

    def _retransmit_loop(self) -> None:
        while self._running:
            time.sleep(0.1)
            with self._sessions_lock:
                sessions = list(self._sessions)
            for session in sessions:
                for pid, topic, payload in session.in_flight.due():
                    try:
                        session.send(encode_publish(topic, payload, 1, pid, dup=True))
                    except OSError:
                        break

    def _session_loop(self, session: _BrokerSession) -> None:
        try:
            ptype, _, body = _read_packet(session.sock)
            if ptype != CONNECT or not self._handle_connect(session, body):
                session.close()
                return
            while session.alive:
                ptype, flags, body = _read_packet(session.sock)
                if ptype == PUBLISH:
                    self._handle_publish(session, flags, body)
                elif ptype == PUBACK:
                    (pid,) = struct.unpack("!H", body)
                    session.in_flight.ack(pid)
                elif ptype == SUBSCRIBE:
                    self._handle_subscribe(session, body)
                elif ptype == PINGREQ:
                    session.send(bytes([PINGRESP << 4, 0]))
                elif ptype == DISCONNECT:
                    break
                else:
                    logger.warning("mqtt: unsupported packet type %d from %s", ptype, session.client_id)
                    break
        except (ConnectionError, OSError, MqttError, struct.error):
            pass
        finally:
            session.close()
            with self._sessions_lock:
                if session in self._sessions:
                    self._sessions.remove(session)

    def _handle_connect(self, session: _BrokerSession, body: bytes) -> bool:
        proto, offset = _parse_string(body, 0)
        level = body[offset]
        connect_flags = body[offset + 1]
        offset += 4  # level + flags + keepalive
        if proto != "MQTT" or level != 4:
            session.send(bytes([CONNACK << 4, 2, 0, 1]))  # unacceptable protocol
            return False
        session.client_id, offset = _parse_string(body, offset)
        if connect_flags & 0x04:  # will flag: parse and ignore
            _, offset = _parse_string(body, offset)
            (n,) = struct.unpack_from("!H", body, offset)
            offset += 2 + n
        username = password = ""
        if connect_flags & 0x80:
            username, offset = _parse_string(body, offset)
        if connect_flags & 0x40:
            password, offset = _parse_string(body, offset)
        if self.authenticate is not None and not self.authenticate(username, password):
            session.send(bytes([CONNACK << 4, 2, 0, 4]))  # bad user name or password
            return False
        session.send(bytes([CONNACK << 4, 2, 0, 0]))
        return True

    def _handle_subscribe(self, session: _BrokerSession, body: bytes) -> None:
        (pid,) = struct.unpack_from("!H", body, 0)
        offset = 2
        codes = bytearray()
        while offset < len(body):
            filter_, offset = _parse_string(body, offset)
            qos = body[offset]
            offset += 1
            if "#" in filter_ or qos > 1:
                codes.append(0x80)  # failure: outside the supported subset
                continue
            session.subscriptions.append((filter_, qos))
            codes.append(qos)
        packet = struct.pack("!H", pid) + bytes(codes)
        session.send(bytes([SUBACK << 4]) + _encode_length(len(packet)) + packet)

    def _handle_publish(self, session: _BrokerSession, flags: int, body: bytes) -> None:
        qos = (flags >> 1) & 0x03
        dup = bool(flags & 0x08)
        topic, offset = _parse_string(body, 0)
        pid = 0
        if qos > 0:
            (pid,) = struct.unpack_from("!H", body, offset)
            offset += 2
        payload = body[offset:]
        if qos == 1 and session.inbound.is_duplicate(pid, dup):
            session.send(encode_puback(pid))
            return
        self.route(topic, payload)
        if qos == 1:
            session.inbound.record(pid)
            session.send(encode_puback(pid))

    def route(self, topic: str, payload: bytes) -> List[threading.Event]:
        """Deliver to local handlers and matching client subscriptions."""
        for filter_, handler in self._local_handlers:
            if topic_matches(filter_, topic):
                try:
                    handler(topic, payload)
                except Exception:  # noqa: BLE001 - a bad handler must not kill the session
                    logger.exception("mqtt: local handler failed for %s", topic)
        acks = []
        with self._sessions_lock:
            sessions = list(self._sessions)
        for session in sessions:
            qos = session.subscribed_qos(topic)
            if qos is None:
                continue
            try:
                done = session.deliver(topic, payload, qos)
            except OSError:
                continue
            if done is not None:
                acks.append(done)
        return acks

    def publish(self, topic: str, payload: bytes, wait_acks: bool = False, timeout: float = 5.0) -> bool:
        """Broker-originated publish (command fan-out).

        With ``wait_acks`` the call blocks until every QoS 1 subscriber has
        acknowledged; returns False if nothing was subscribed.
        """
        acks = self.route(topic, payload)
        delivered = bool(acks)
        if wait_acks:
            deadline = time.monotonic() + timeout
            for done in acks:
                remaining = max(0.0, deadline - time.monotonic())
                if not done.wait(remaining):
                    raise MqttError(f"no PUBACK for broker publish on {topic}")
        if not delivered:
            with self._sessions_lock:
                sessions = list(self._sessions)
            delivered = any(s.subscribed_qos(topic) is not None for s in sessions)
        return delivered


class MqttClient:
    """Blocking client with a background reader thread."""

    def __init__(
        self,
        host: str,
        port: int,
        client_id: str,
        username: str = "",
        password: str = "",
        on_message: Optional[Callable[[str, bytes], None]] = None,
    ) -> None:
        self.host = host
        self.port = port
        self.client_id = client_id
        self.username = username
        self.password = password
        self.on_message = on_message
        self._sock: Optional[socket.socket] = None
        self._reader: Optional[threading.Thread] = None
        self._write_lock = threading.Lock()
        self._pids = _PacketIds()
        self._pub_acks: Dict[int, dict] = {}
        self._sub_acks: Dict[int, threading.Event] = {}
        self._inbound = _Inbound()
        self._connected = False

    @property
    def connected(self) -> bool:
        return self._connected

    def connect(self, timeout: float = 5.0) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        flags = 0x02  # clean session
        payload = _encode_string(self.client_id)
        if self.username:
            flags |= 0x80
            payload += _encode_string(self.username)
        if self.password:
            flags |= 0x40
            payload += _encode_string(self.password)
        body = _encode_string("MQTT") + bytes([4, flags]) + struct.pack("!H", 60) + payload
        sock.sendall(bytes([CONNECT << 4]) + _encode_length(len(body)) + body)
        ptype, _, ack = _read_packet(sock)
        if ptype != CONNACK or ack[1] != 0:
            sock.close()
            raise MqttError(f"connection refused (code {ack[1] if ptype == CONNACK else '?'})")
        sock.settimeout(None)
        self._sock = sock
        self._connected = True
        self._reader = threading.Thread(target=self._read_loop, name=f"mqtt-{self.client_id}", daemon=True)
        self._reader.start()

    def _send(self, data: bytes) -> None:
        if not self._connected:
            raise MqttError("not connected")
        with self._write_lock:
            self._sock.sendall(data)

    def _read_loop(self) -> None:
        try:
            while True:
                ptype, flags, body = _read_packet(self._sock)
                if ptype == PUBLISH:
                    qos = (flags >> 1) & 0x03
                    dup = bool(flags & 0x08)
                    topic, offset = _parse_string(body, 0)
                    pid = 0
                    if qos > 0:
                        (pid,) = struct.unpack_from("!H", body, offset)
                        offset += 2
                    payload = body[offset:]
                    if qos == 1 and self._inbound.is_duplicate(pid, dup):
                        self._send(encode_puback(pid))
                        continue
                    if self.on_message is not None:
                        try:
                            self.on_message(topic, payload)
                        except Exception:  # noqa: BLE001
                            logger.exception("mqtt client %s: on_message failed", self.client_id)
                    if qos == 1:
                        self._inbound.record(pid)
                        self._send(encode_puback(pid))
                elif ptype == PUBACK:
                    (pid,) = struct.unpack("!H", body)
                    entry = self._pub_acks.pop(pid, None)
                    if entry:
                        entry["acked"] = True
                        entry["event"].set()
                elif ptype == SUBACK:
                    (pid,) = struct.unpack_from("!H", body, 0)
                    done = self._sub_acks.pop(pid, None)
                    if done:
                        done.set()
                elif ptype == PINGRESP:
                    pass
                else:
                    logger.warning("mqtt client %s: unexpected packet %d", self.client_id, ptype)
        except (ConnectionError, OSError, MqttError, struct.error):
            pass
        finally:
            self._connected = False
            for entry in list(self._pub_acks.values()):
                entry["event"].set()
            for done in list(self._sub_acks.values()):
                done.set()
            self._pub_acks.clear()
            self._sub_acks.clear()

    def subscribe(self, filters: List[str], qos: int = 1, timeout: float = 5.0) -> None:
        pid = self._pids.take()
        done = threading.Event()
        self._sub_acks[pid] = done
        body = struct.pack("!H", pid)
        for filter_ in filters:
            body += _encode_string(filter_) + bytes([qos])
        self._send(bytes([(SUBSCRIBE << 4) | 0x02]) + _encode_length(len(body)) + body)
        if not done.wait(timeout) or not self._connected:
            raise MqttError("SUBACK not received")

    def publish(self, topic: str, payload: bytes, qos: int = 1, timeout: float = 10.0) -> None:
        """Publish; at QoS 1 blocks until PUBACK, retransmitting with DUP."""
        if qos == 0:
            self._send(encode_publish(topic, payload, 0))
            return
        pid = self._pids.take()
        entry = {"event": threading.Event(), "acked": False}
        self._pub_acks[pid] = entry
        self._send(encode_publish(topic, payload, 1, pid))
        deadline = time.monotonic() + timeout
        while True:
            if entry["event"].wait(RETRANSMIT_AFTER_S):
                if entry["acked"]:
                    return
                raise MqttError("connection lost before PUBACK")
            if not self._connected:
                raise MqttError("connection lost before PUBACK")
            if time.monotonic() > deadline:
                self._pub_acks.pop(pid, None)
                raise MqttError(f"PUBACK timeout on {topic}")
            self._send(encode_publish(topic, payload, 1, pid, dup=True))

    def close(self) -> None:
        if self._connected:
            try:
                self._send(bytes([DISCONNECT << 4, 0]))
            except (MqttError, OSError):
                pass
        self._connected = False
        if self._sock:
            try:
                self._sock.close()
            except OSError:
                pass
        if self._reader and self._reader is not threading.current_thread():
            self._reader.join(timeout=2)
