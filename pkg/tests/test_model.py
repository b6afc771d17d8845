"""Core model: taxonomy validation, dedup keys, envelope round-trips."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hems.model import (
    ActionKind,
    CommandOrigin,
    ControlCommand,
    DeviceCategory,
    DeviceDescriptor,
    EnergyMonotonicityChecker,
    Event,
    EventKind,
    Measurement,
    MetricKind,
    Protocol,
    Severity,
    TariffBand,
    TariffSchedule,
    dedup_key,
    validate_command,
    validate_descriptor,
    validate_fleet,
    validate_measurement,
)
from hems.wire import WireError, decode_envelope, encode_envelope, loads_envelope


def descriptor(**overrides):
    base = dict(
        device_id="plug1",
        home_id="h1",
        room="kitchen",
        category=DeviceCategory.CONTROLLER,
        protocol=Protocol.MQTT,
        capabilities=frozenset({ActionKind.SWITCH_ON, ActionKind.SWITCH_OFF, MetricKind.POWER_W}),
    )
    base.update(overrides)
    return DeviceDescriptor(**base)


class TestDescriptorValidation:
    def test_sensor_with_action_capability_rejected(self):
        d = descriptor(
            category=DeviceCategory.SENSOR,
            capabilities=frozenset({MetricKind.TEMPERATURE_C, ActionKind.SWITCH_ON}),
        )
        result = validate_descriptor(d)
        assert not result.ok
        assert any("action capability on non-controller" in v for v in result.violations)

    def test_meter_with_power_and_energy_ok(self):
        d = descriptor(
            category=DeviceCategory.METER,
            capabilities=frozenset({MetricKind.POWER_W, MetricKind.ENERGY_WH}),
        )
        assert validate_descriptor(d).ok

    def test_meter_with_sensor_metric_rejected(self):
        d = descriptor(
            category=DeviceCategory.METER,
            capabilities=frozenset({MetricKind.TEMPERATURE_C}),
        )
        assert not validate_descriptor(d).ok

    def test_controller_without_action_rejected(self):
        d = descriptor(capabilities=frozenset({MetricKind.POWER_W}))
        result = validate_descriptor(d)
        assert any("at least one action" in v for v in result.violations)

    def test_controller_may_meter(self):
        d = descriptor(
            capabilities=frozenset({ActionKind.SWITCH_OFF, MetricKind.POWER_W, MetricKind.ENERGY_WH})
        )
        assert validate_descriptor(d).ok

    def test_controller_with_sensor_metric_rejected(self):
        d = descriptor(
            capabilities=frozenset({ActionKind.SWITCH_OFF, MetricKind.LIGHT_LUX})
        )
        assert not validate_descriptor(d).ok

    def test_duplicate_id_in_home(self):
        a = descriptor(device_id="dup")
        b = descriptor(device_id="dup", room="hall")
        result = validate_fleet([a, b])
        assert any("duplicate id" in v for v in result.violations)

    def test_same_id_in_different_homes_ok(self):
        a = descriptor(device_id="dup", home_id="h1")
        b = descriptor(device_id="dup", home_id="h2")
        assert validate_fleet([a, b]).ok


class TestMeasurementValidation:
    def test_humidity_range(self):
        m = Measurement("s1", MetricKind.HUMIDITY_PCT, 101.0, 0, 0)
        assert not validate_measurement(m).ok

    def test_occupancy_binary(self):
        assert validate_measurement(Measurement("s1", MetricKind.OCCUPANCY, 0.5, 0, 0)).violations
        assert validate_measurement(Measurement("s1", MetricKind.OCCUPANCY, 1.0, 0, 0)).ok

    def test_non_finite_rejected(self):
        m = Measurement("s1", MetricKind.POWER_W, math.nan, 0, 0)
        assert not validate_measurement(m).ok

    def test_energy_monotonicity_checker(self):
        checker = EnergyMonotonicityChecker()
        assert checker.observe(Measurement("m1", MetricKind.ENERGY_WH, 10.0, 0, 0)) is None
        assert checker.observe(Measurement("m1", MetricKind.ENERGY_WH, 10.0, 1, 1)) is None
        assert checker.observe(Measurement("m1", MetricKind.ENERGY_WH, 9.0, 2, 2)) is not None
        # epoch bump resets the baseline
        assert checker.observe(Measurement("m1", MetricKind.ENERGY_WH, 0.0, 3, 3, seq_epoch=1)) is None


class TestDedupKey:
    def test_same_measurement_same_key(self):
        m1 = Measurement("d1", MetricKind.POWER_W, 800.0, 1000, 7)
        m2 = Measurement("d1", MetricKind.POWER_W, 800.0, 1000, 7)
        assert dedup_key(m1) == dedup_key(m2)

    def test_epoch_in_key(self):
        before = Measurement("d1", MetricKind.POWER_W, 1.0, 0, 5, seq_epoch=0)
        after = Measurement("d1", MetricKind.POWER_W, 1.0, 0, 0, seq_epoch=1)
        assert dedup_key(before) != dedup_key(after)

    def test_device_in_key(self):
        a = Measurement("d1", MetricKind.POWER_W, 1.0, 0, 5)
        b = Measurement("d2", MetricKind.POWER_W, 1.0, 0, 5)
        assert dedup_key(a) != dedup_key(b)


class TestCommandValidation:
    def test_setpoint_range(self):
        cmd = ControlCommand("c1", "t1", ActionKind.SET_SETPOINT_C, CommandOrigin.USER, 0, arg=50.0)
        assert not validate_command(cmd).ok
        ok = ControlCommand("c2", "t1", ActionKind.SET_SETPOINT_C, CommandOrigin.USER, 0, arg=21.0)
        assert validate_command(ok).ok

    def test_charge_rate_device_bound(self):
        cmd = ControlCommand("c1", "ev1", ActionKind.SET_CHARGE_RATE_W, CommandOrigin.EDGE, 0, arg=-3000.0)
        assert validate_command(cmd, max_charge_rate_w=7000.0).ok
        assert not validate_command(cmd, max_charge_rate_w=2000.0).ok

    def test_capability_check(self):
        cmd = ControlCommand("c1", "s1", ActionKind.SWITCH_ON, CommandOrigin.USER, 0)
        caps = frozenset({MetricKind.TEMPERATURE_C})
        assert not validate_command(cmd, capabilities=caps).ok

    def test_switch_takes_no_arg(self):
        cmd = ControlCommand("c1", "p1", ActionKind.SWITCH_OFF, CommandOrigin.USER, 0, arg=1.0)
        assert not validate_command(cmd).ok


class TestTariff:
    def test_full_coverage_required(self):
        t = TariffSchedule(bands=(TariffBand(0, 12, 0.2),))
        assert not t.validate().ok

    def test_overlap_rejected(self):
        t = TariffSchedule(bands=(TariffBand(0, 13, 0.2), TariffBand(12, 24, 0.3)))
        assert any("more than one band" in v for v in t.validate().violations)

    def test_price_lookup(self):
        t = TariffSchedule(
            bands=(TariffBand(0, 8, 0.1), TariffBand(8, 24, 0.4)),
            peak_windows=((17, 21),),
        )
        assert t.validate().ok
        assert t.price_at_hour(3) == 0.1
        assert t.price_at_hour(8) == 0.4
        assert t.cheapest_price() == 0.1
        assert t.in_peak_window(18.5)
        assert not t.in_peak_window(16.9)


# --- wire envelope round-trips ------------------------------------------

finite_floats = st.floats(allow_nan=False, allow_infinity=False, width=64)
ids = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters="-_"),
    min_size=1,
    max_size=24,
)
timestamps = st.integers(min_value=0, max_value=4_102_444_800_000)
seqs = st.integers(min_value=0, max_value=2**40)

measurements = st.builds(
    Measurement,
    device_id=ids,
    metric=st.sampled_from(list(MetricKind)),
    value=finite_floats,
    timestamp=timestamps,
    seq=seqs,
    seq_epoch=st.integers(min_value=0, max_value=100),
)

commands = st.one_of(
    st.builds(
        ControlCommand,
        command_id=ids,
        device_id=ids,
        action=st.sampled_from([ActionKind.SWITCH_ON, ActionKind.SWITCH_OFF]),
        origin=st.sampled_from(list(CommandOrigin)),
        issued_at=timestamps,
        arg=st.none(),
    ),
    st.builds(
        ControlCommand,
        command_id=ids,
        device_id=ids,
        action=st.sampled_from([ActionKind.SET_SETPOINT_C, ActionKind.SET_CHARGE_RATE_W]),
        origin=st.sampled_from(list(CommandOrigin)),
        issued_at=timestamps,
        arg=finite_floats,
    ),
)

payload_values = st.one_of(ids, finite_floats, st.integers(-1000, 1000), st.booleans())
events = st.builds(
    Event,
    event_id=ids,
    kind=st.sampled_from(list(EventKind)),
    severity=st.sampled_from(list(Severity)),
    source=ids,
    timestamp=timestamps,
    payload=st.dictionaries(ids, payload_values, max_size=4),
)


class TestWireRoundTrip:
    @settings(max_examples=200)
    @given(measurements)
    def test_measurement_round_trip(self, m):
        assert decode_envelope(encode_envelope(m)) == m

    @settings(max_examples=200)
    @given(commands)
    def test_command_round_trip(self, c):
        assert decode_envelope(encode_envelope(c)) == c

    @settings(max_examples=100)
    @given(events)
    def test_event_round_trip(self, e):
        decoded = decode_envelope(encode_envelope(e))
        assert decoded == Event(
            e.event_id, e.kind, e.severity, e.source, e.timestamp, dict(e.payload)
        )

    def test_unknown_field_rejected(self):
        m = Measurement("d1", MetricKind.POWER_W, 1.0, 0, 0)
        data = encode_envelope(m)
        data["extra"] = 1
        with pytest.raises(WireError):
            decode_envelope(data)

    def test_wrong_version_rejected(self):
        data = encode_envelope(Measurement("d1", MetricKind.POWER_W, 1.0, 0, 0))
        data["v"] = 2
        with pytest.raises(WireError):
            decode_envelope(data)

    def test_string_value_rejected(self):
        data = encode_envelope(Measurement("d1", MetricKind.POWER_W, 1.0, 0, 0))
        data["value"] = "high"
        with pytest.raises(WireError):
            decode_envelope(data)

    def test_malformed_json_rejected(self):
        with pytest.raises(WireError):
            loads_envelope(b"{not json")
