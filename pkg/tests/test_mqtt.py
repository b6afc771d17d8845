"""Embedded MQTT broker/client: pub-sub, QoS 1, wildcards, auth, dedup."""

import threading
import time

import pytest

from hems.adapters.mqtt import MqttBroker, MqttClient, MqttError, topic_matches


@pytest.fixture
def broker():
    b = MqttBroker(port=0)
    # port 0 is not supported by our bind-and-report-less broker; pick a free one
    import socket

    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    b.port = probe.getsockname()[1]
    probe.close()
    b.start()
    yield b
    b.stop()


def make_client(broker, client_id, on_message=None, username="", password=""):
    c = MqttClient(
        "127.0.0.1", broker.port, client_id, username=username, password=password, on_message=on_message
    )
    c.connect()
    return c


class TestTopicMatching:
    def test_exact(self):
        assert topic_matches("hems/h1/d1/tel/power", "hems/h1/d1/tel/power")

    def test_single_level_wildcard(self):
        assert topic_matches("hems/+/+/tel/+", "hems/h1/d1/tel/power")
        assert not topic_matches("hems/+/tel/+", "hems/h1/d1/tel/power")

    def test_no_multi_level(self):
        assert not topic_matches("hems/+", "hems/h1/d1")


class TestPubSub:
    def test_two_subscribers_both_receive(self, broker):
        got_a, got_b = [], []
        a = make_client(broker, "a", on_message=lambda t, p: got_a.append((t, p)))
        b = make_client(broker, "b", on_message=lambda t, p: got_b.append((t, p)))
        p = make_client(broker, "p")
        try:
            a.subscribe(["room/+"])
            b.subscribe(["room/temp"])
            p.publish("room/temp", b"21.5", qos=1)
            deadline = time.time() + 2
            while (not got_a or not got_b) and time.time() < deadline:
                time.sleep(0.01)
            assert got_a == [("room/temp", b"21.5")]
            assert got_b == [("room/temp", b"21.5")]
        finally:
            a.close()
            b.close()
            p.close()

    def test_qos0_delivery(self, broker):
        got = []
        a = make_client(broker, "a", on_message=lambda t, p: got.append(p))
        p = make_client(broker, "p")
        try:
            a.subscribe(["x"], qos=0)
            p.publish("x", b"1", qos=0)
            deadline = time.time() + 2
            while not got and time.time() < deadline:
                time.sleep(0.01)
            assert got == [b"1"]
        finally:
            a.close()
            p.close()

    def test_local_handler_runs_before_puback(self, broker):
        order = []
        broker.add_local_handler("tel/+", lambda t, p: order.append("handled"))
        p = make_client(broker, "p")
        try:
            p.publish("tel/power", b"800", qos=1)
            order.append("acked")
            assert order == ["handled", "acked"]
        finally:
            p.close()

    def test_broker_publish_waits_for_subscriber_acks(self, broker):
        got = []
        a = make_client(broker, "dev", on_message=lambda t, p: got.append(p))
        try:
            a.subscribe(["dev/cmd"])
            assert broker.publish("dev/cmd", b"off", wait_acks=True)
            assert got == [b"off"]
        finally:
            a.close()

    def test_publish_to_nobody_returns_false(self, broker):
        assert broker.publish("nobody/home", b"x") is False


class TestAuth:
    def test_bad_credentials_refused(self):
        import socket

        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        broker = MqttBroker(port=port, authenticate=lambda u, p: (u, p) == ("h1", "secret"))
        broker.start()
        try:
            with pytest.raises(MqttError):
                make_client(broker, "bad", username="h1", password="wrong")
            ok = make_client(broker, "good", username="h1", password="secret")
            ok.close()
        finally:
            broker.stop()


class TestQos1Dedup:
    def test_duplicate_pid_with_dup_flag_processed_once(self, broker):
        """Simulate a retransmission: same packet id, DUP set."""
        import socket
        import struct

        from hems.adapters.mqtt import _encode_length, _encode_string, _read_packet

        got = []
        broker.add_local_handler("t/+", lambda t, p: got.append(p))
        sock = socket.create_connection(("127.0.0.1", broker.port))
        body = _encode_string("MQTT") + bytes([4, 0x02]) + struct.pack("!H", 60) + _encode_string("raw")
        sock.sendall(bytes([1 << 4]) + _encode_length(len(body)) + body)
        _read_packet(sock)  # CONNACK
        pub_body = _encode_string("t/x") + struct.pack("!H", 7) + b"v"
        first = bytes([(3 << 4) | 0x02]) + _encode_length(len(pub_body)) + pub_body
        dup = bytes([(3 << 4) | 0x0A]) + _encode_length(len(pub_body)) + pub_body
        sock.sendall(first)
        assert _read_packet(sock)[0] == 4  # PUBACK
        sock.sendall(dup)
        assert _read_packet(sock)[0] == 4  # acked again
        sock.close()
        assert got == [b"v"]
