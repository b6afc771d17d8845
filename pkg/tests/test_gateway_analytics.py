"""Aggregation, anomaly detection, curtailment, and load shifting.

The derived expectations here are computed by independent oracles:
brute-force recomputation for aggregates, subset enumeration for
curtailment, exhaustive start enumeration for the scheduler.
"""

import itertools
import math
import random

import pytest

from hems.gateway import (
    AnomalyDetector,
    CurtailableDevice,
    DetectorConfig,
    FlexLoad,
    Infeasible,
    aggregate_window,
    plan_curtailment,
    run_at_earliest,
    schedule_flexible_loads,
    tariff_slot_prices,
)
from hems.model import (
    ActionKind,
    DrSignal,
    Measurement,
    MetricKind,
    TariffBand,
    TariffSchedule,
)


def m(device, metric, value, ts, seq):
    return Measurement(device, metric, value, ts, seq)


class TestAggregateWindow:
    def test_basic_stats(self):
        samples = [
            m("d1", MetricKind.POWER_W, 100.0, 10_000, 0),
            m("d1", MetricKind.POWER_W, 300.0, 20_000, 1),
        ]
        records = aggregate_window(samples, 60)
        assert len(records) == 1
        r = records[0]
        assert (r.sum, r.mean, r.min, r.max, r.sample_count) == (400.0, 200.0, 100.0, 300.0, 2)

    def test_single_sample_degenerate(self):
        records = aggregate_window([m("d1", MetricKind.TEMPERATURE_C, 21.5, 5_000, 0)], 60)
        r = records[0]
        assert r.min == r.mean == r.max == 21.5

    def test_home_mean_is_sum_of_device_means(self):
        # Devices sampling in lockstep at 200 W and 300 W: the merged home
        # series is 500 W at each timestamp, so the home mean is 500.
        samples = []
        for i, ts in enumerate((10_000, 20_000, 30_000)):
            samples.append(m("a", MetricKind.POWER_W, 200.0, ts, i))
            samples.append(m("b", MetricKind.POWER_W, 300.0, ts, i))
        records = aggregate_window(samples, 60, home_id="h1")
        home = [r for r in records if r.scope == "h1"]
        assert len(home) == 1
        assert home[0].mean == 500.0
        assert home[0].sample_count == 3

    def test_brute_force_oracle_random_stream(self):
        rng = random.Random(42)
        samples = []
        seqs = {}
        for _ in range(400):
            device = rng.choice(["a", "b", "c"])
            ts = rng.randrange(0, 600_000)
            seq = seqs.get(device, 0)
            seqs[device] = seq + 1
            samples.append(m(device, MetricKind.POWER_W, rng.uniform(0, 2000), ts, seq))
        window_s = 60
        records = aggregate_window(samples, window_s, home_id="h1")

        # oracle: recompute from the raw stream
        for r in records:
            if r.scope == "h1":
                by_ts = {}
                for s in samples:
                    if r.window_start <= s.timestamp < r.window_end:
                        by_ts[s.timestamp] = by_ts.get(s.timestamp, 0.0) + s.value
                values = list(by_ts.values())
            else:
                values = [
                    s.value
                    for s in samples
                    if s.device_id == r.scope and r.window_start <= s.timestamp < r.window_end
                ]
            assert r.sample_count == len(values)
            assert math.isclose(r.sum, sum(values), rel_tol=1e-9)
            assert math.isclose(r.mean, sum(values) / len(values), rel_tol=1e-9)
            assert r.min == min(values) and r.max == max(values)

    def test_energy_delta_last_minus_last_before(self):
        samples = [
            m("d1", MetricKind.ENERGY_WH, 0.0, 0, 0),
            m("d1", MetricKind.ENERGY_WH, 500.0, 59 * 60_000, 1),
            m("d1", MetricKind.ENERGY_WH, 800.0, 90 * 60_000, 2),
        ]
        records = aggregate_window(samples, 3600)
        assert [r.energy_wh_delta for r in records] == [500.0, 300.0]

    def test_empty_stream_no_records(self):
        assert aggregate_window([], 60) == []


class TestAnomalyDetector:
    def test_stuck_fires_exactly_at_nth(self):
        detector = AnomalyDetector(DetectorConfig(stuck_window=30))
        events = []
        for i in range(60):
            events.extend(detector.observe(m("t1", MetricKind.TEMPERATURE_C, 21.5, i * 1000, i)))
        assert len(events) == 1
        assert events[0].payload["run_length"] == 30
        assert events[0].timestamp == 29 * 1000  # the 30th sample

    def test_stuck_resets_on_change(self):
        detector = AnomalyDetector(DetectorConfig(stuck_window=5))
        events = []
        for i in range(4):
            events.extend(detector.observe(m("t1", MetricKind.TEMPERATURE_C, 1.0, i, i)))
        for i in range(4, 8):
            events.extend(detector.observe(m("t1", MetricKind.TEMPERATURE_C, 2.0, i, i)))
        assert events == []  # two runs of 4, neither reaches the window of 5

    def test_phantom_first_qualifying_sample(self):
        detector = AnomalyDetector(
            DetectorConfig(phantom_threshold_w=5.0), switch_state=lambda d: False
        )
        events = detector.observe(m("p1", MetricKind.POWER_W, 40.0, 1000, 0))
        assert len(events) == 1
        assert events[0].payload["detector"] == "phantom_load"
        # repeat samples in the same episode stay silent
        assert detector.observe(m("p1", MetricKind.POWER_W, 40.0, 2000, 1)) == []

    def test_phantom_needs_switch_off(self):
        detector = AnomalyDetector(DetectorConfig(), switch_state=lambda d: True)
        assert detector.observe(m("p1", MetricKind.POWER_W, 40.0, 0, 0)) == []

    def test_outlier_constant_stream_silent(self):
        detector = AnomalyDetector(DetectorConfig(stuck_window=100, zscore_window=10, zscore_limit=4.0))
        events = []
        for i in range(50):
            events.extend(detector.observe(m("t1", MetricKind.TEMPERATURE_C, 20.0, i, i)))
        assert events == []  # sigma = 0 guard

    def test_outlier_fires_on_spike(self):
        detector = AnomalyDetector(DetectorConfig(zscore_window=20, zscore_limit=4.0))
        events = []
        for i in range(40):
            value = 20.0 + 0.01 * (i % 7)
            events.extend(detector.observe(m("t1", MetricKind.TEMPERATURE_C, value, i, i)))
        assert events == []
        events.extend(detector.observe(m("t1", MetricKind.TEMPERATURE_C, 90.0, 40, 40)))
        assert len(events) == 1
        assert events[0].payload["detector"] == "outlier"

    def test_smooth_drift_does_not_fire(self):
        # locally linear drift has |z| around sqrt(3), far from the limit
        detector = AnomalyDetector(DetectorConfig(zscore_window=30, zscore_limit=4.0))
        events = []
        for i in range(500):
            events.extend(detector.observe(m("t1", MetricKind.TEMPERATURE_C, 15.0 + 0.02 * i, i, i)))
        assert events == []


def curtailable(device_id, power, rank, v2g=0.0, charge_rate=False):
    return CurtailableDevice(
        device_id=device_id,
        power_w=power,
        rank=rank,
        can_switch_off=True,
        has_charge_rate=charge_rate,
        v2g_discharge_w=v2g,
    )


def signal(target, sid="dr1"):
    return DrSignal(sid, target, window_start=0, window_end=900_000)


class TestCurtailment:
    FLEET = [
        curtailable("fridge", 150.0, 0),
        curtailable("ev-charger", 7000.0, 1),
        curtailable("water-heater", 2000.0, 2),
    ]

    def test_greedy_picks_lowest_rank_first(self):
        # oracle: exhaustive search confirms no prefix of lower-rank devices
        # meets 1500 W before the EV charger alone does
        plan, warning = plan_curtailment(signal(1500.0), self.FLEET, now_ms=0)
        assert warning is None
        assert [a.device_id for a in plan.actions] == ["ev-charger"]
        assert plan.achieved_reduction_w == 7000.0
        subsets = [
            combo
            for n in range(1, 3)
            for combo in itertools.combinations(["ev-charger", "water-heater"], n)
            if sum({"ev-charger": 7000.0, "water-heater": 2000.0}[d] for d in combo) >= 1500.0
        ]
        assert min(len(s) for s in subsets) == 1  # greedy used the minimum prefix

    def test_greedy_extends_until_target(self):
        plan, warning = plan_curtailment(signal(8000.0), self.FLEET, now_ms=0)
        assert warning is None
        assert [a.device_id for a in plan.actions] == ["ev-charger", "water-heater"]
        assert plan.achieved_reduction_w == 9000.0

    def test_rank_zero_never_curtailed(self):
        plan, _ = plan_curtailment(signal(100_000.0), self.FLEET, now_ms=0)
        assert "fridge" not in [a.device_id for a in plan.actions]

    def test_unreachable_target_warns(self):
        plan, warning = plan_curtailment(signal(100.0), [curtailable("fridge", 150.0, 0)], now_ms=0)
        assert plan.actions == ()
        assert warning is not None and warning.payload["achieved_reduction_w"] == 0.0

    def test_battery_discharge_counts(self):
        fleet = [curtailable("battery", 0.0, 1, v2g=3000.0, charge_rate=True)]
        plan, warning = plan_curtailment(signal(2500.0), fleet, now_ms=0)
        assert warning is None
        action = plan.actions[0]
        assert action.expected_reduction_w == 3000.0
        assert action.command.action is ActionKind.SET_CHARGE_RATE_W
        assert action.command.arg == -3000.0

    def test_tie_break_larger_power_then_id(self):
        fleet = [
            curtailable("b-dev", 500.0, 1),
            curtailable("a-dev", 500.0, 1),
            curtailable("big", 900.0, 1),
        ]
        plan, _ = plan_curtailment(signal(10_000.0), fleet, now_ms=0)
        assert [a.device_id for a in plan.actions] == ["big", "a-dev", "b-dev"]

    def test_determinism(self):
        for _ in range(5):
            p1, _ = plan_curtailment(signal(8000.0), self.FLEET, now_ms=0)
            p2, _ = plan_curtailment(signal(8000.0), self.FLEET, now_ms=0)
            assert p1 == p2


def brute_force_min_cost(loads, prices, slot_seconds):
    """Exhaustive search over the full product of feasible starts."""
    best = None
    feasible = []
    for load in loads:
        last = min(load.latest_slot, len(prices) - load.duration_slots)
        feasible.append(range(load.earliest_slot, last + 1))
    for combo in itertools.product(*feasible):
        cost = 0.0
        for load, start in zip(loads, combo):
            kwh = load.power_w / 1000.0 * slot_seconds / 3600.0
            cost += sum(prices[start + k] * kwh for k in range(load.duration_slots))
        if best is None or cost < best:
            best = cost
    return best


class TestFlexScheduler:
    def test_single_load_worked_example(self):
        # 2 kW x 2 slots, window 0..5, slot prices [5,5,1,1,5,5]:
        # start 2 is the cheapest of the 5 feasible starts (enumerated)
        prices = [5.0, 5.0, 1.0, 1.0, 5.0, 5.0]
        load = FlexLoad("washer", 2000.0, 2, 0, 4)
        schedule = schedule_flexible_loads([load], prices, 3600)
        assert schedule.assignments == (("washer", 2),)
        assert schedule.total_cost == 2.0 * (1.0 + 1.0)  # 2 kWh per slot at price 1
        assert schedule.total_cost == brute_force_min_cost([load], prices, 3600)

    def test_zero_loads(self):
        schedule = schedule_flexible_loads([], [1.0] * 4, 3600)
        assert schedule.assignments == () and schedule.total_cost == 0.0

    def test_tie_broken_earliest(self):
        prices = [2.0, 1.0, 1.0, 2.0]
        load = FlexLoad("l", 1000.0, 1, 0, 3)
        schedule = schedule_flexible_loads([load], prices, 3600)
        assert schedule.assignments == (("l", 1),)

    def test_matches_exhaustive_on_random_instances(self):
        rng = random.Random(7)
        price_grid = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0]
        for _ in range(60):
            n_slots = rng.randrange(4, 13)
            prices = [rng.choice(price_grid) for _ in range(n_slots)]
            loads = []
            for i in range(rng.randrange(1, 4)):
                duration = rng.randrange(1, 4)
                earliest = rng.randrange(0, n_slots - duration + 1)
                latest = rng.randrange(earliest, n_slots - duration + 1)
                loads.append(FlexLoad(f"l{i}", rng.choice([250, 500, 1000, 2000]), duration, earliest, latest))
            schedule = schedule_flexible_loads(loads, prices, 3600)
            assert schedule.total_cost == brute_force_min_cost(loads, prices, 3600)

    def test_peak_cap_feasible_and_not_worse_than_earliest(self):
        prices = [1.0, 1.0, 1.0, 1.0]
        loads = [
            FlexLoad("a", 2000.0, 2, 0, 2),
            FlexLoad("b", 2000.0, 2, 0, 2),
        ]
        schedule = schedule_flexible_loads(loads, prices, 3600, peak_cap_w=2000.0)
        assert schedule.peak_w <= 2000.0
        starts = dict(schedule.assignments)
        assert abs(starts["a"] - starts["b"]) >= 2  # they cannot overlap
        _, earliest_cost, _ = run_at_earliest(loads, prices, 3600)
        assert schedule.total_cost <= earliest_cost  # flat prices: equal cost

    def test_peak_cap_infeasible_raises(self):
        loads = [
            FlexLoad("a", 2000.0, 2, 0, 0),
            FlexLoad("b", 2000.0, 2, 0, 0),
        ]
        with pytest.raises(Infeasible):
            schedule_flexible_loads(loads, [1.0, 1.0], 3600, peak_cap_w=2000.0)

    def test_load_that_cannot_fit_alone(self):
        with pytest.raises(Infeasible):
            schedule_flexible_loads([FlexLoad("x", 100.0, 3, 0, 0)], [1.0, 1.0], 3600)

    def test_tariff_slot_prices(self):
        tariff = TariffSchedule(
            bands=(TariffBand(0, 8, 0.1), TariffBand(8, 24, 0.4)),
        )
        prices = tariff_slot_prices(tariff, 3600, 10)
        assert prices == [0.1] * 8 + [0.4] * 2

    def test_energy_conserved_by_shifting(self):
        prices = [3.0, 1.0, 2.0, 1.0, 3.0]
        loads = [FlexLoad("a", 1500.0, 2, 0, 3), FlexLoad("b", 750.0, 1, 0, 4)]
        schedule = schedule_flexible_loads(loads, prices, 3600)
        scheduled_wh = sum(l.power_w * l.duration_slots for l in loads)
        assert scheduled_wh == 1500.0 * 2 + 750.0  # shifting never changes energy
