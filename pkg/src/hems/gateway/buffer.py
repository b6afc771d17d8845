"""Durable store-and-forward queue between gateway and cloud.

Append-only JSONL of canonical envelopes plus a tiny sidecar recording
how many leading lines have been consumed (delivered or evicted). A
restarted gateway reloads everything not yet consumed, so an
acknowledged-but-undelivered envelope survives the restart and gets
re-sent; the cloud deduplicates. When the pending backlog would exceed
capacity the oldest pending entry is evicted, which is the one loss mode
and is reported to the caller for a critical event.
"""

from __future__ import annotations

import json
import os
import threading
from typing import List, Optional, Tuple

from ..wire import canonical_json


class ForwardBuffer:
    def __init__(self, path: str, capacity: int = 10_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        self.path = path
        self.meta_path = path + ".meta"
        self.capacity = capacity
        self._lock = threading.Condition()
        self._pending: List[str] = []
        self._consumed = 0
        self.high_water = 0
        self.evicted_total = 0
        self._load_and_compact()
        self._fh = open(self.path, "a", encoding="utf-8")

    def _load_and_compact(self) -> None:
        consumed = 0
        if os.path.exists(self.meta_path):
            try:
                with open(self.meta_path, "r", encoding="utf-8") as fh:
                    consumed = int(json.load(fh).get("consumed", 0))
            except (ValueError, OSError):
                consumed = 0
        lines: List[str] = []
        if os.path.exists(self.path):
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        lines.append(line)
        self._pending = lines[consumed:]
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for line in self._pending:
                fh.write(line + "\n")
        os.replace(tmp, self.path)
        self._consumed = 0
        self._write_meta()

    def _write_meta(self) -> None:
        tmp = self.meta_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"consumed": self._consumed}, fh)
        os.replace(tmp, self.meta_path)

    def append(self, envelope_dict: dict) -> int:
        """Queue one envelope; returns how many old entries were evicted."""
        line = canonical_json(envelope_dict)
        evicted = 0
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
            self._pending.append(line)
            while len(self._pending) > self.capacity:
                self._pending.pop(0)
                self._consumed += 1
                evicted += 1
            if evicted:
                self.evicted_total += evicted
                self._write_meta()
            self.high_water = max(self.high_water, len(self._pending))
            self._lock.notify_all()
        return evicted

    def peek_batch(self, limit: int) -> List[dict]:
        with self._lock:
            return [json.loads(line) for line in self._pending[:limit]]

    def ack(self, count: int) -> None:
        """Mark the first ``count`` pending entries as delivered."""
        if count <= 0:
            return
        with self._lock:
            del self._pending[:count]
            self._consumed += count
            self._write_meta()
            self._lock.notify_all()

    @property
    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def wait_for_entries(self, timeout: float) -> bool:
        with self._lock:
            if self._pending:
                return True
            self._lock.wait(timeout)
            return bool(self._pending)

    def wait_until_empty(self, timeout: float) -> bool:
        deadline = threading.TIMEOUT_MAX if timeout is None else timeout
        with self._lock:
            return self._lock.wait_for(lambda: not self._pending, deadline)

    def close(self) -> None:
        with self._lock:
            try:
                self._fh.close()
            except OSError:
                pass
