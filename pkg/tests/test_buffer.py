"""Forward buffer: persistence, restart recovery, capacity eviction."""

import json

from hems.gateway.buffer import ForwardBuffer
from hems.model import Measurement, MetricKind
from hems.wire import encode_envelope


def envelope(seq, device="d1"):
    return encode_envelope(Measurement(device, MetricKind.POWER_W, float(seq), seq * 1000, seq))


class TestForwardBuffer:
    def test_fifo_and_ack(self, tmp_path):
        buf = ForwardBuffer(str(tmp_path / "q.jsonl"), capacity=100)
        for i in range(5):
            buf.append(envelope(i))
        batch = buf.peek_batch(3)
        assert [b["seq"] for b in batch] == [0, 1, 2]
        buf.ack(3)
        assert [b["seq"] for b in buf.peek_batch(10)] == [3, 4]
        buf.close()

    def test_restart_resends_unacked(self, tmp_path):
        path = str(tmp_path / "q.jsonl")
        buf = ForwardBuffer(path, capacity=100)
        for i in range(4):
            buf.append(envelope(i))
        buf.ack(2)
        buf.close()

        reopened = ForwardBuffer(path, capacity=100)
        assert [b["seq"] for b in reopened.peek_batch(10)] == [2, 3]
        reopened.close()

    def test_compaction_on_open(self, tmp_path):
        path = str(tmp_path / "q.jsonl")
        buf = ForwardBuffer(path, capacity=100)
        for i in range(10):
            buf.append(envelope(i))
        buf.ack(10)
        buf.close()
        reopened = ForwardBuffer(path, capacity=100)
        assert reopened.pending_count == 0
        reopened.close()
        with open(path) as fh:
            assert fh.read() == ""  # fully acked entries are gone after compaction

    def test_capacity_evicts_oldest(self, tmp_path):
        buf = ForwardBuffer(str(tmp_path / "q.jsonl"), capacity=10)
        evicted = 0
        for i in range(12):
            evicted += buf.append(envelope(i))
        assert evicted == 2
        assert [b["seq"] for b in buf.peek_batch(20)] == list(range(2, 12))
        assert buf.evicted_total == 2
        buf.close()

    def test_high_water_mark(self, tmp_path):
        buf = ForwardBuffer(str(tmp_path / "q.jsonl"), capacity=100)
        for i in range(7):
            buf.append(envelope(i))
        buf.ack(7)
        assert buf.high_water == 7
        buf.close()

    def test_file_lines_are_canonical_json(self, tmp_path):
        path = str(tmp_path / "q.jsonl")
        buf = ForwardBuffer(path, capacity=10)
        buf.append(envelope(0))
        buf.close()
        with open(path) as fh:
            line = fh.readline().strip()
        parsed = json.loads(line)
        assert parsed["kind"] == "measurement"
        assert list(parsed.keys()) == sorted(parsed.keys())
