"""Cloud service + HTTP API: ingestion idempotency, CRUD, events, downlink."""

import json
import threading

import pytest
import requests

from hems.cloud import CloudApiServer, CloudService
from hems.model import (
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Severity,
    TariffBand,
    TariffSchedule,
)
from hems.wire import encode_envelope

HOME = "h1"
TOKEN = "tok-1"

TARIFF = TariffSchedule(
    bands=(TariffBand(0, 17, 0.10), TariffBand(17, 21, 0.40), TariffBand(21, 24, 0.10)),
    peak_windows=((17.0, 21.0),),
)


@pytest.fixture
def cloud(tmp_path):
    service = CloudService(str(tmp_path / "cloud"))
    service.provision_home(HOME, TOKEN, rooms=["kitchen", "hall"], tariff=TARIFF)
    service.add_device(
        HOME,
        {
            "device_id": "plug1",
            "category": "controller",
            "protocol": "mqtt",
            "capabilities": ["switch_on", "switch_off", "power", "energy"],
            "room": "kitchen",
            "rank": 1,
            "curtailable": True,
        },
        timestamp=1000,
    )
    api = CloudApiServer(service)
    api.start()
    yield {"service": service, "api": api, "base": api.base_url()}
    api.stop()
    service.close()


def auth(token=TOKEN):
    return {"Authorization": f"Bearer {token}"}


def measurement_env(seq, value=100.0, device="plug1", metric=MetricKind.ENERGY_WH):
    return encode_envelope(Measurement(device, metric, value, 1_700_000_000_000 + seq * 60_000, seq))


class TestIngest:
    def test_batch_idempotent(self, cloud):
        batch = [measurement_env(i, value=float(i)) for i in range(5)]
        url = cloud["base"] + "/api/v1/ingest"
        first = requests.post(url, json=batch, headers=auth(), timeout=5)
        assert first.status_code == 200
        assert len(first.json()["accepted"]) == 5
        store_file = cloud["service"].stores.measurements.path
        with open(store_file, "rb") as fh:
            bytes_after_first = fh.read()
        second = requests.post(url, json=batch, headers=auth(), timeout=5)
        assert second.status_code == 200
        assert second.json() == first.json()  # identical ack
        with open(store_file, "rb") as fh:
            assert fh.read() == bytes_after_first  # store unchanged

    def test_malformed_envelope_rejects_whole_batch(self, cloud):
        batch = [measurement_env(0), {"v": 1, "kind": "measurement", "bogus": True}]
        response = requests.post(cloud["base"] + "/api/v1/ingest", json=batch, headers=auth(), timeout=5)
        assert response.status_code == 422
        assert cloud["service"].stores.measurements.count == 0

    def test_empty_batch_ok(self, cloud):
        response = requests.post(cloud["base"] + "/api/v1/ingest", json=[], headers=auth(), timeout=5)
        assert response.status_code == 200
        assert response.json()["accepted"] == []

    def test_bad_token_401(self, cloud):
        response = requests.post(
            cloud["base"] + "/api/v1/ingest", json=[], headers=auth("wrong"), timeout=5
        )
        assert response.status_code == 401

    def test_unknown_device_dropped_with_event(self, cloud):
        batch = [measurement_env(0, device="ghost")]
        response = requests.post(cloud["base"] + "/api/v1/ingest", json=batch, headers=auth(), timeout=5)
        assert response.status_code == 200
        assert response.json()["accepted"] == []
        events = cloud["service"].query_events(HOME, kind="system_alert")
        assert any(e["payload"].get("code") == "unknown_device" for e in events)


class TestRegistry:
    def test_add_then_list(self, cloud):
        response = requests.post(
            cloud["base"] + f"/api/v1/homes/{HOME}/devices",
            json={
                "device_id": "sensor1",
                "category": "sensor",
                "protocol": "coap",
                "capabilities": ["temperature"],
                "room": "hall",
            },
            headers=auth(),
            timeout=5,
        )
        assert response.status_code == 201
        listing = requests.get(
            cloud["base"] + f"/api/v1/homes/{HOME}/devices", headers=auth(), timeout=5
        ).json()
        assert {d["device_id"] for d in listing["devices"]} == {"plug1", "sensor1"}

    def test_duplicate_add_409(self, cloud):
        response = requests.post(
            cloud["base"] + f"/api/v1/homes/{HOME}/devices",
            json={
                "device_id": "plug1",
                "category": "controller",
                "protocol": "mqtt",
                "capabilities": ["switch_on"],
            },
            headers=auth(),
            timeout=5,
        )
        assert response.status_code == 409

    def test_unknown_room_rejected(self, cloud):
        response = requests.post(
            cloud["base"] + f"/api/v1/homes/{HOME}/devices",
            json={
                "device_id": "x",
                "category": "sensor",
                "protocol": "http",
                "capabilities": ["temperature"],
                "room": "attic",
            },
            headers=auth(),
            timeout=5,
        )
        assert response.status_code == 422

    def test_modify_logs_audit_event(self, cloud):
        response = requests.put(
            cloud["base"] + f"/api/v1/homes/{HOME}/devices/plug1",
            json={"rank": 3},
            headers=auth(),
            timeout=5,
        )
        assert response.status_code == 200
        assert response.json()["rank"] == 3
        events = cloud["service"].query_events(HOME, kind="system_alert", source="registry")
        audit = [e for e in events if e["payload"].get("op") == "modify"]
        assert audit and audit[-1]["payload"]["old"]["rank"] == 1

    def test_remove_tombstones_but_history_queryable(self, cloud):
        requests.post(
            cloud["base"] + "/api/v1/ingest", json=[measurement_env(0, 42.0)], headers=auth(), timeout=5
        )
        response = requests.delete(
            cloud["base"] + f"/api/v1/homes/{HOME}/devices/plug1", headers=auth(), timeout=5
        )
        assert response.status_code == 200
        # new ingest from removed device is dropped with an event
        drop = requests.post(
            cloud["base"] + "/api/v1/ingest", json=[measurement_env(1, 50.0)], headers=auth(), timeout=5
        )
        assert drop.json()["accepted"] == []
        # but the old rows are still queryable
        energy = requests.get(
            cloud["base"] + f"/api/v1/homes/{HOME}/energy",
            params={"scope": "plug1", "timeframe": "hourly"},
            headers=auth(),
            timeout=5,
        )
        assert energy.status_code == 200
        assert len(energy.json()["buckets"]) == 1

    def test_missing_device_404(self, cloud):
        response = requests.put(
            cloud["base"] + f"/api/v1/homes/{HOME}/devices/nope",
            json={"rank": 1},
            headers=auth(),
            timeout=5,
        )
        assert response.status_code == 404


class TestEventsApi:
    def event_env(self, event_id, ts, severity=Severity.INFO):
        return encode_envelope(
            Event(event_id, EventKind.SYSTEM_ALERT, severity, "tester", ts, {"k": "v"})
        )

    def test_append_and_query_ordered(self, cloud):
        url = cloud["base"] + f"/api/v1/homes/{HOME}/events"
        for i, ts in enumerate((3000, 1000, 2000)):
            body = self.event_env(f"e{i}", ts)
            # distinct sources avoid the per-source monotonicity rule
            body["source"] = f"s{i}"
            response = requests.post(url, json=body, headers=auth(), timeout=5)
            assert response.status_code == 201
        events = requests.get(url, headers=auth(), timeout=5).json()["events"]
        mine = [e for e in events if e["source"].startswith("s")]
        assert [e["timestamp"] for e in mine] == [1000, 2000, 3000]

    def test_duplicate_event_409(self, cloud):
        url = cloud["base"] + f"/api/v1/homes/{HOME}/events"
        body = self.event_env("dup", 1000)
        assert requests.post(url, json=body, headers=auth(), timeout=5).status_code == 201
        assert requests.post(url, json=body, headers=auth(), timeout=5).status_code == 409

    def test_severity_filter(self, cloud):
        url = cloud["base"] + f"/api/v1/homes/{HOME}/events"
        requests.post(url, json=self.event_env("i1", 1000), headers=auth(), timeout=5)
        got = requests.get(url, params={"severity": "critical"}, headers=auth(), timeout=5)
        assert got.json()["events"] == []

    def test_bad_filter_400(self, cloud):
        url = cloud["base"] + f"/api/v1/homes/{HOME}/events"
        assert requests.get(url, params={"kind": "nope"}, headers=auth(), timeout=5).status_code == 400


class TestCommandsAndDr:
    def test_post_command_appears_on_downlink(self, cloud):
        post = requests.post(
            cloud["base"] + f"/api/v1/homes/{HOME}/commands",
            json={"device_id": "plug1", "action": "switch_off"},
            headers=auth(),
            timeout=5,
        )
        assert post.status_code == 201
        fetched = requests.get(
            cloud["base"] + f"/api/v1/homes/{HOME}/commands",
            params={"cursor": 0},
            headers=auth(),
            timeout=5,
        ).json()
        assert fetched["cursor"] == 1
        assert fetched["items"][0]["action"] == "switch_off"
        # a command_issued event was logged
        events = cloud["service"].query_events(HOME, kind="command_issued")
        assert len(events) == 1

    def test_command_capability_validated(self, cloud):
        post = requests.post(
            cloud["base"] + f"/api/v1/homes/{HOME}/commands",
            json={"device_id": "plug1", "action": "set_setpoint", "arg": 21.0},
            headers=auth(),
            timeout=5,
        )
        assert post.status_code == 422

    def test_long_poll_wakes_on_post(self, cloud):
        results = {}

        def poll():
            results["response"] = requests.get(
                cloud["base"] + f"/api/v1/homes/{HOME}/commands",
                params={"cursor": 0, "wait_ms": 3000},
                headers=auth(),
                timeout=10,
            ).json()

        thread = threading.Thread(target=poll)
        thread.start()
        requests.post(
            cloud["base"] + f"/api/v1/homes/{HOME}/commands",
            json={"device_id": "plug1", "action": "switch_on"},
            headers=auth(),
            timeout=5,
        )
        thread.join(timeout=5)
        assert results["response"]["items"][0]["action"] == "switch_on"

    def test_dr_signal_queued(self, cloud):
        post = requests.post(
            cloud["base"] + f"/api/v1/homes/{HOME}/dr-signals",
            json={"signal_id": "dr1", "target_reduction_w": 1500, "window_start": 0, "window_end": 900_000},
            headers=auth(),
            timeout=5,
        )
        assert post.status_code == 201
        fetched = requests.get(
            cloud["base"] + f"/api/v1/homes/{HOME}/commands",
            params={"cursor": 0},
            headers=auth(),
            timeout=5,
        ).json()
        assert fetched["items"][0]["event_kind"] == "dr_signal"


class TestSettings:
    def test_roundtrip(self, cloud):
        put = requests.put(
            cloud["base"] + f"/api/v1/homes/{HOME}/settings",
            json={"auto_mitigate": False, "stuck_window": 50},
            headers=auth(),
            timeout=5,
        )
        assert put.status_code == 200
        got = requests.get(
            cloud["base"] + f"/api/v1/homes/{HOME}/settings", headers=auth(), timeout=5
        ).json()
        assert got["settings"]["auto_mitigate"] is False
