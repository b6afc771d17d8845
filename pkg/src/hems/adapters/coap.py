"""CoAP over UDP: the RFC 7252 message layer this stack relies on.

One :class:`CoapEndpoint` plays both roles on a single socket: it serves
confirmable GET/PUT/POST requests with piggybacked ACK responses and
message-ID deduplication (duplicate CONs get the cached response, the
handler runs once), and it issues confirmable requests with exponential
retransmission. Observe, blockwise transfer, and proxying are out of
scope.
"""

from __future__ import annotations

import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

TYPE_CON, TYPE_NON, TYPE_ACK, TYPE_RST = 0, 1, 2, 3

GET, POST, PUT, DELETE = 1, 2, 3, 4
_METHOD_NAMES = {GET: "GET", POST: "POST", PUT: "PUT", DELETE: "DELETE"}

CHANGED = (2 << 5) | 4  # 2.04
CONTENT = (2 << 5) | 5  # 2.05
BAD_REQUEST = (4 << 5) | 0
UNAUTHORIZED = (4 << 5) | 1
NOT_FOUND = (4 << 5) | 4
METHOD_NOT_ALLOWED = (4 << 5) | 5
INTERNAL_ERROR = (5 << 5) | 0

OPT_URI_PATH = 11
OPT_CONTENT_FORMAT = 12

ACK_TIMEOUT_S = 0.25
MAX_RETRANSMIT = 4
EXCHANGE_LIFETIME_S = 30.0


class CoapError(Exception):
    pass


class CoapTimeout(CoapError):
    pass


@dataclass
class CoapMessage:
    mtype: int
    code: int
    mid: int
    token: bytes = b""
    options: List[Tuple[int, bytes]] = field(default_factory=list)
    payload: bytes = b""

    @property
    def is_request(self) -> bool:
        return (self.code >> 5) == 0 and self.code != 0

    def uri_path(self) -> str:
        segments = [opt.decode("utf-8") for num, opt in self.options if num == OPT_URI_PATH]
        return "/" + "/".join(segments)


def encode_message(msg: CoapMessage) -> bytes:
    if not 0 <= len(msg.token) <= 8:
        raise CoapError("token length out of range")
    head = struct.pack(
        "!BBH", (1 << 6) | (msg.mtype << 4) | len(msg.token), msg.code, msg.mid
    )
    out = bytearray(head)
    out += msg.token
    last = 0
    for number, value in sorted(msg.options, key=lambda o: o[0]):
        delta = number - last
        last = number
        d, dx = _option_nibble(delta)
        l, lx = _option_nibble(len(value))
        out.append((d << 4) | l)
        out += dx + lx + value
    if msg.payload:
        out.append(0xFF)
        out += msg.payload
    return bytes(out)


def _option_nibble(value: int) -> Tuple[int, bytes]:
    if value < 13:
        return value, b""
    if value < 269:
        return 13, bytes([value - 13])
    return 14, struct.pack("!H", value - 269)


def decode_message(data: bytes) -> CoapMessage:
    if len(data) < 4:
        raise CoapError("datagram too short")
    first, code, mid = struct.unpack("!BBH", data[:4])
    if first >> 6 != 1:
        raise CoapError(f"unsupported CoAP version {first >> 6}")
    mtype = (first >> 4) & 0x03
    tkl = first & 0x0F
    if tkl > 8:
        raise CoapError("token length out of range")
    offset = 4
    token = data[offset : offset + tkl]
    offset += tkl
    options: List[Tuple[int, bytes]] = []
    number = 0
    while offset < len(data):
        byte = data[offset]
        if byte == 0xFF:
            offset += 1
            break
        offset += 1
        delta, length = byte >> 4, byte & 0x0F
        delta, offset = _option_extend(delta, data, offset)
        length, offset = _option_extend(length, data, offset)
        number += delta
        options.append((number, data[offset : offset + length]))
        offset += length
    return CoapMessage(mtype, code, mid, token, options, data[offset:])


def _option_extend(nibble: int, data: bytes, offset: int) -> Tuple[int, int]:
    if nibble < 13:
        return nibble, offset
    if nibble == 13:
        return data[offset] + 13, offset + 1
    if nibble == 14:
        (v,) = struct.unpack_from("!H", data, offset)
        return v + 269, offset + 2
    raise CoapError("reserved option nibble 15")


def path_options(path: str) -> List[Tuple[int, bytes]]:
    return [(OPT_URI_PATH, seg.encode("utf-8")) for seg in path.strip("/").split("/") if seg]


Handler = Callable[[str, str, bytes], Tuple[int, bytes]]


class CoapEndpoint:
    """UDP endpoint acting as CoAP server and client simultaneously."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, handler: Optional[Handler] = None):
        self.handler = handler
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise CoapError(f"cannot bind CoAP endpoint to {host}:{port}: {exc}") from None
        self.host, self.port = self._sock.getsockname()
        self._mid = random.randrange(0, 0x10000)
        self._mid_lock = threading.Lock()
        self._pending: Dict[Tuple[str, int, int], dict] = {}
        self._seen: Dict[Tuple[Tuple[str, int], int], Tuple[float, bytes]] = {}
        self._running = False
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._running = True
        self._thread = threading.Thread(target=self._read_loop, name="coap-endpoint", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._running = False
        try:
            # zero-length datagram to self wakes the blocked recvfrom
            self._sock.sendto(b"", (self.host, self.port))
        except OSError:
            pass
        if self._thread:
            self._thread.join(timeout=2)
        try:
            self._sock.close()
        except OSError:
            pass

    def _next_mid(self) -> int:
        with self._mid_lock:
            self._mid = (self._mid + 1) % 0x10000
            return self._mid

    def _read_loop(self) -> None:
        while self._running:
            try:
                data, addr = self._sock.recvfrom(65536)
            except OSError:
                return
            if not self._running:
                return
            try:
                msg = decode_message(data)
            except CoapError as exc:
                logger.warning("coap: dropping malformed datagram from %s: %s", addr, exc)
                continue
            if msg.is_request:
                self._serve(msg, addr)
            else:
                key = (addr[0], addr[1], msg.mid)
                exchange = self._pending.get(key)
                if exchange is not None:
                    exchange["response"] = msg
                    exchange["event"].set()

    def _serve(self, msg: CoapMessage, addr) -> None:
        now = time.monotonic()
        for key in [k for k, (expiry, _) in self._seen.items() if expiry < now]:
            del self._seen[key]
        dedup_key = (addr, msg.mid)
        if msg.mtype == TYPE_CON and dedup_key in self._seen:
            self._sock.sendto(self._seen[dedup_key][1], addr)
            return
        method = _METHOD_NAMES.get(msg.code, "?")
        if self.handler is None:
            code, body = NOT_FOUND, b""
        else:
            try:
                code, body = self.handler(method, msg.uri_path(), msg.payload)
            except Exception:  # noqa: BLE001 - handler bugs must not kill the endpoint
                logger.exception("coap: handler failed for %s %s", method, msg.uri_path())
                code, body = INTERNAL_ERROR, b""
        if msg.mtype != TYPE_CON:
            return  # NON requests get no response in this subset
        reply = encode_message(CoapMessage(TYPE_ACK, code, msg.mid, msg.token, [], body))
        self._seen[dedup_key] = (now + EXCHANGE_LIFETIME_S, reply)
        try:
            self._sock.sendto(reply, addr)
        except OSError:
            pass

    def request(
        self,
        address: Tuple[str, int],
        method: int,
        path: str,
        payload: bytes = b"",
        timeout: Optional[float] = None,
    ) -> Tuple[int, bytes]:
        """Confirmable request; retransmits until ACK or retries exhausted."""
        mid = self._next_mid()
        token = struct.pack("!I", mid)
        msg = CoapMessage(TYPE_CON, method, mid, token, path_options(path), payload)
        datagram = encode_message(msg)
        key = (address[0], address[1], mid)
        exchange = {"event": threading.Event(), "response": None}
        self._pending[key] = exchange
        try:
            wait = ACK_TIMEOUT_S
            attempts = MAX_RETRANSMIT + 1
            deadline = time.monotonic() + timeout if timeout else None
            for attempt in range(attempts):
                self._sock.sendto(datagram, address)
                remaining = wait
                if deadline is not None:
                    remaining = min(remaining, deadline - time.monotonic())
                if remaining > 0 and exchange["event"].wait(remaining):
                    response = exchange["response"]
                    return response.code, response.payload
                if deadline is not None and time.monotonic() >= deadline:
                    break
                wait *= 2
            raise CoapTimeout(f"no ACK from {address} for {path}")
        finally:
            self._pending.pop(key, None)
