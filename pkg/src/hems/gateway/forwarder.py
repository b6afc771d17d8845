"""Uplink: drains the forward buffer into the cloud ingest endpoint.

Batches are POSTed in FIFO order and only acknowledged out of the buffer
on a 200, giving at-least-once delivery with per-device ordering; the
cloud deduplicates replays. While the cloud is down the forwarder backs
off and the buffer absorbs the backlog. A batch the cloud permanently
rejects (422) is dropped with a critical callback rather than wedging
the pipeline.
"""

from __future__ import annotations

import logging
import threading
import time
from typing import Callable, Optional

import requests

from .buffer import ForwardBuffer

logger = logging.getLogger(__name__)


class Forwarder:
    def __init__(
        self,
        buffer: ForwardBuffer,
        cloud_base_url: str,
        token: str,
        batch_size: int = 200,
        on_drop: Optional[Callable[[int, str], None]] = None,
    ):
        self.buffer = buffer
        self.url = cloud_base_url.rstrip("/") + "/api/v1/ingest"
        self.token = token
        self.batch_size = batch_size
        self.on_drop = on_drop or (lambda count, reason: None)
        self._session = requests.Session()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.delivered_total = 0

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="forwarder", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
        self._session.close()

    def drain(self, timeout: float = 30.0) -> bool:
        """Block until the buffer is empty (delivered), or time out."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.buffer.pending_count == 0:
                return True
            time.sleep(0.02)
        return self.buffer.pending_count == 0

    def _run(self) -> None:
        backoff = 0.05
        while not self._stop.is_set():
            if not self.buffer.wait_for_entries(timeout=0.2):
                continue
            batch = self.buffer.peek_batch(self.batch_size)
            if not batch:
                continue
            try:
                response = self._session.post(
                    self.url,
                    json=batch,
                    headers={"Authorization": f"Bearer {self.token}"},
                    timeout=5.0,
                )
            except requests.RequestException as exc:
                logger.debug("forwarder: cloud unreachable (%s); backing off", exc)
                self._stop.wait(backoff)
                backoff = min(1.0, backoff * 2)
                continue
            if response.status_code == 200:
                self.buffer.ack(len(batch))
                self.delivered_total += len(batch)
                backoff = 0.05
            elif response.status_code == 422:
                logger.error("forwarder: cloud rejected batch permanently: %s", response.text)
                self.buffer.ack(len(batch))  # dead-letter: drop to keep the pipeline moving
                self.on_drop(len(batch), response.text)
            else:
                logger.warning("forwarder: cloud answered %d; retrying", response.status_code)
                self._stop.wait(backoff)
                backoff = min(1.0, backoff * 2)
