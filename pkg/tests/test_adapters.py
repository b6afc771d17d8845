"""Protocol adapters: codec units and cross-protocol equivalence on sockets."""

import threading

import pytest

from hems.adapters import (
    DeviceRegistry,
    EncodeFailure,
    MalformedPayload,
    ProtocolBinding,
    RawFrame,
    UnknownDevice,
    decode_command_frame,
    emit_command,
    encode_telemetry,
    ingest,
)
from hems.adapters.hub import (
    CoapDeviceLink,
    DeliveryError,
    HttpDeviceLink,
    MqttDeviceLink,
    SharedCommandServer,
    TransportHub,
)
from hems.model import (
    ActionKind,
    CommandOrigin,
    ControlCommand,
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Protocol,
    Severity,
)

HOME = "h1"
TOKEN = "secret-token"


def registry_with(*device_ids, protocol=Protocol.MQTT):
    reg = DeviceRegistry()
    for did in device_ids:
        reg.register(HOME, did, protocol)
    return reg


class TestIngestCodec:
    def test_mqtt_route_direct_mapping(self):
        m = Measurement("plug1", MetricKind.POWER_W, 800.0, 1_700_000_000_000, 7)
        frame = RawFrame(Protocol.MQTT, "hems/h1/plug1/tel/power", encode_telemetry(m))
        result = ingest(frame, registry_with("plug1"))
        assert result == m

    def test_same_reading_identical_across_protocols(self):
        m = Measurement("plug1", MetricKind.POWER_W, 800.0, 1_700_000_000_000, 7)
        body = encode_telemetry(m)
        reg = registry_with("plug1")
        frames = [
            RawFrame(Protocol.MQTT, "hems/h1/plug1/tel/power", body),
            RawFrame(Protocol.COAP, "/tel/h1/plug1/power", body),
            RawFrame(Protocol.HTTP, "/ingest/h1/plug1/power", body),
        ]
        results = [ingest(f, reg) for f in frames]
        assert results[0] == results[1] == results[2] == m

    def test_non_numeric_value_malformed(self):
        frame = RawFrame(Protocol.MQTT, "hems/h1/plug1/tel/power", b'{"v":1,"value":"high","ts":0,"seq":0}')
        with pytest.raises(MalformedPayload):
            ingest(frame, registry_with("plug1"))

    def test_unregistered_device_rejected(self):
        m = Measurement("ghost", MetricKind.POWER_W, 1.0, 0, 0)
        frame = RawFrame(Protocol.MQTT, "hems/h1/ghost/tel/power", encode_telemetry(m))
        with pytest.raises(UnknownDevice):
            ingest(frame, registry_with("plug1"))

    def test_event_segment_carries_event(self):
        event = Event("e1", EventKind.COMMAND_APPLIED, Severity.INFO, "plug1", 123, {"command_id": "c1"})
        from hems.adapters.codec import encode_device_event

        frame = RawFrame(Protocol.COAP, "/tel/h1/plug1/event", encode_device_event(event))
        result = ingest(frame, registry_with("plug1"))
        assert isinstance(result, Event)
        assert result.event_id == "e1"


class TestCommandCodec:
    def binding(self, protocol=Protocol.MQTT):
        return ProtocolBinding(protocol=protocol, home_id=HOME, device_id="plug1")

    def test_mqtt_command_topic(self):
        cmd = ControlCommand("c1", "plug1", ActionKind.SWITCH_OFF, CommandOrigin.CLOUD, 1000)
        frame = emit_command(cmd, self.binding())
        assert frame.route == "hems/h1/plug1/cmd"

    def test_round_trip_identity(self):
        cmd = ControlCommand("c2", "plug1", ActionKind.SET_SETPOINT_C, CommandOrigin.USER, 99, arg=21.5)
        for protocol in Protocol:
            frame = emit_command(cmd, self.binding(protocol))
            assert decode_command_frame(frame) == cmd

    def test_out_of_range_setpoint_encode_failure(self):
        cmd = ControlCommand("c3", "plug1", ActionKind.SET_SETPOINT_C, CommandOrigin.USER, 0, arg=50.0)
        with pytest.raises(EncodeFailure):
            emit_command(cmd, self.binding())

    def test_wrong_device_binding_rejected(self):
        cmd = ControlCommand("c4", "other", ActionKind.SWITCH_ON, CommandOrigin.USER, 0)
        with pytest.raises(EncodeFailure):
            emit_command(cmd, self.binding())


@pytest.fixture
def hub_env():
    """Live hub with one device link per protocol, plus a collecting sink."""
    received = []
    adapter_events = []
    lock = threading.Lock()

    def sink(envelope):
        with lock:
            received.append(envelope)

    registry = DeviceRegistry()
    for did, proto in (("m-dev", Protocol.MQTT), ("c-dev", Protocol.COAP), ("h-dev", Protocol.HTTP)):
        registry.register(HOME, did, proto)

    hub = TransportHub(
        HOME, TOKEN, registry, sink, on_adapter_event=lambda e: adapter_events.append(e)
    )
    hub.start()
    command_server = SharedCommandServer()
    command_server.start()
    links = {
        Protocol.MQTT: MqttDeviceLink(HOME, "m-dev", TOKEN, "127.0.0.1", hub.ports["mqtt"]),
        Protocol.COAP: CoapDeviceLink(HOME, "c-dev", "127.0.0.1", hub.ports["coap"]),
        Protocol.HTTP: HttpDeviceLink(HOME, "h-dev", TOKEN, "127.0.0.1", hub.ports["http"], command_server),
    }
    for link in links.values():
        link.connect()
    env = {
        "hub": hub,
        "links": links,
        "received": received,
        "adapter_events": adapter_events,
        "command_server": command_server,
    }
    yield env
    for link in links.values():
        link.close()
    command_server.stop()
    hub.stop()


class TestLiveTransports:
    def test_telemetry_all_protocols(self, hub_env):
        links = hub_env["links"]
        sent = {}
        for proto, device in ((Protocol.MQTT, "m-dev"), (Protocol.COAP, "c-dev"), (Protocol.HTTP, "h-dev")):
            m = Measurement(device, MetricKind.POWER_W, 123.5, 1_700_000_000_000, 1)
            links[proto].send(m)
            sent[device] = m
        received = {m.device_id: m for m in hub_env["received"]}
        assert received == sent

    def test_command_delivery_each_protocol(self, hub_env):
        hub = hub_env["hub"]
        links = hub_env["links"]
        bindings = {
            Protocol.MQTT: ProtocolBinding(Protocol.MQTT, HOME, "m-dev"),
            Protocol.COAP: ProtocolBinding(
                Protocol.COAP, HOME, "c-dev", "127.0.0.1", links[Protocol.COAP].port
            ),
            Protocol.HTTP: ProtocolBinding(
                Protocol.HTTP, HOME, "h-dev", "127.0.0.1", links[Protocol.HTTP].port
            ),
        }
        for proto, device in ((Protocol.MQTT, "m-dev"), (Protocol.COAP, "c-dev"), (Protocol.HTTP, "h-dev")):
            cmd = ControlCommand(f"c-{device}", device, ActionKind.SWITCH_OFF, CommandOrigin.CLOUD, 5)
            hub.send_command(cmd, bindings[proto])
            drained = links[proto].drain_commands()
            assert drained == [cmd]

    def test_malformed_frame_does_not_block_others(self, hub_env):
        links = hub_env["links"]
        import requests

        bad = requests.post(
            f"http://127.0.0.1:{hub_env['hub'].ports['http']}/ingest/h1/h-dev/power",
            data=b'{"value":"high"}',
            headers={"Authorization": f"Bearer {TOKEN}"},
            timeout=2,
        )
        assert bad.status_code == 400
        good = Measurement("h-dev", MetricKind.POWER_W, 5.0, 10, 2)
        links[Protocol.HTTP].send(good)
        assert good in hub_env["received"]
        assert any(e.payload.get("code") == "malformed_payload" for e in hub_env["adapter_events"])

    def test_http_auth_required(self, hub_env):
        import requests

        r = requests.post(
            f"http://127.0.0.1:{hub_env['hub'].ports['http']}/ingest/h1/h-dev/power",
            data=b'{"v":1,"value":1,"ts":0,"seq":0}',
            timeout=2,
        )
        assert r.status_code == 401

    def test_command_to_dead_coap_device_raises(self, hub_env):
        hub = hub_env["hub"]
        binding = ProtocolBinding(Protocol.COAP, HOME, "c-dev", "127.0.0.1", 1)  # nothing listens
        cmd = ControlCommand("cx", "c-dev", ActionKind.SWITCH_ON, CommandOrigin.CLOUD, 0)
        with pytest.raises(DeliveryError):
            hub.send_command(cmd, binding, timeout=0.5)

    def test_cross_protocol_equivalence_sample(self, hub_env):
        """The central theorem at small scale; the acceptance suite runs 1000."""
        links = hub_env["links"]
        canonical = []
        for seq in range(10):
            value = 100.0 + seq * 3.25
            for device, proto in (("m-dev", Protocol.MQTT), ("c-dev", Protocol.COAP), ("h-dev", Protocol.HTTP)):
                m = Measurement(device, MetricKind.ENERGY_WH, value, 1_700_000_000_000 + seq, seq)
                links[proto].send(m)
                canonical.append(m)
        assert sorted(hub_env["received"], key=lambda m: (m.device_id, m.seq)) == sorted(
            canonical, key=lambda m: (m.device_id, m.seq)
        )
