"""Maintenance trend fitting and recommendation rules."""

import math
from datetime import datetime, timezone

from hems.cloud.maintenance import (
    MaintenanceConfig,
    analyze_maintenance,
    baseline_power_by_day,
    energy_per_cycle_by_day,
    fit_line,
)
from hems.cloud.recommend import (
    OccupancyTrack,
    RecommendConfig,
    adjust_setpoint,
    reduce_lighting,
    shift_appliance,
)
from hems.model import Measurement, MetricKind, TariffBand, TariffSchedule

DAY_MS = 86_400_000


def ms(*args):
    return int(datetime(*args, tzinfo=timezone.utc).timestamp() * 1000)


def closed_form_ols(points):
    """Textbook normal equations, written independently of the implementation."""
    n = len(points)
    sx = sum(x for x, _ in points)
    sy = sum(y for _, y in points)
    sxx = sum(x * x for x, _ in points)
    sxy = sum(x * y for x, y in points)
    slope = (n * sxy - sx * sy) / (n * sxx - sx * sx)
    intercept = (sy - slope * sx) / n
    return slope, intercept


class TestFitLine:
    def test_matches_closed_form_on_exact_line(self):
        points = [(float(d), 500.0 + 10.0 * d) for d in range(11)]
        slope, intercept, r2 = fit_line(points)
        oracle_slope, oracle_intercept = closed_form_ols(points)
        assert math.isclose(slope, oracle_slope, rel_tol=1e-9)
        assert math.isclose(intercept, oracle_intercept, rel_tol=1e-9)
        assert math.isclose(r2, 1.0, rel_tol=1e-12)

    def test_noisy_points_match_normal_equations(self):
        points = [(0.0, 5.1), (1.0, 4.8), (2.0, 5.6), (3.0, 5.9), (4.0, 5.2)]
        slope, intercept, _ = fit_line(points)
        oracle_slope, oracle_intercept = closed_form_ols(points)
        assert math.isclose(slope, oracle_slope, rel_tol=1e-9)
        assert math.isclose(intercept, oracle_intercept, rel_tol=1e-9)


class TestAnalyzeMaintenance:
    def make_points(self, values, origin=ms(2026, 1, 1)):
        return [(origin + d * DAY_MS, v) for d, v in enumerate(values)]

    def test_worked_example_2pct_per_day(self):
        # 500,510,...,600 over 11 days: slope 10 Wh/day = 2%/day of the 500
        # intercept; breach at 125% (625 Wh) is day 12.5
        points = self.make_points([500.0 + 10.0 * d for d in range(11)])
        alert = analyze_maintenance("pump1", "energy_per_cycle", points)
        assert alert is not None
        assert math.isclose(alert.slope_per_day, 10.0, rel_tol=1e-9)
        assert math.isclose(alert.intercept, 500.0, rel_tol=1e-9)
        expected_breach = points[0][0] + int(12.5 * DAY_MS)
        assert alert.projected_breach_ms == expected_breach

    def test_flat_series_no_alert(self):
        points = self.make_points([500.0] * 14)
        assert analyze_maintenance("d", "energy_per_cycle", points) is None

    def test_min_points_gate(self):
        points = self.make_points([500.0, 520.0, 540.0])
        assert analyze_maintenance("d", "energy_per_cycle", points, MaintenanceConfig(min_points=7)) is None

    def test_slope_below_threshold_no_alert(self):
        # 0.5%/day of intercept: below the 1%/day default
        points = self.make_points([1000.0 + 5.0 * d for d in range(10)])
        assert analyze_maintenance("d", "energy_per_cycle", points) is None


class TestIndicators:
    def test_energy_per_cycle(self):
        day0 = ms(2026, 1, 1)
        power, energy = [], []
        total = 0.0
        seq = 0
        for day in range(3):
            for cycle in range(2):  # two cycles per day, 500 Wh each
                base = day0 + day * DAY_MS + cycle * 6 * 3_600_000
                for step, p in enumerate((1000.0, 1000.0, 0.0)):
                    ts = base + step * 1_800_000
                    power.append(Measurement("d", MetricKind.POWER_W, p, ts, seq))
                    total += p * 0.5
                    energy.append(Measurement("d", MetricKind.ENERGY_WH, total, ts, seq + 1))
                    seq += 2
        points = energy_per_cycle_by_day(power, energy)
        assert len(points) == 3
        # each cycle adds 1000 Wh; day 0 loses the 500 Wh baseline seed:
        # (2000-500)/2 = 750, then 2000/2 = 1000 per day
        assert [v for _, v in points] == [750.0, 1000.0, 1000.0]

    def test_baseline_power(self):
        day0 = ms(2026, 1, 1)
        power = [
            Measurement("d", MetricKind.POWER_W, v, day0 + i * 3_600_000, i)
            for i, v in enumerate((5.0, 100.0, 3.0, 80.0))
        ]
        assert baseline_power_by_day(power) == [(day0, 3.0)]


TARIFF = TariffSchedule(
    bands=(TariffBand(0, 17, 0.10), TariffBand(17, 21, 0.40), TariffBand(21, 24, 0.10)),
    peak_windows=((17.0, 21.0),),
)


class TestRecommendations:
    def test_shift_appliance_worked_example(self):
        # 1000 Wh inside the 0.40 peak band, cheapest 0.10: savings 0.30/day
        day0 = ms(2026, 1, 5)
        energy = [
            Measurement("washer", MetricKind.ENERGY_WH, v, day0 + int(h * 3_600_000), i)
            for i, (h, v) in enumerate([(17.0, 0.0), (18.0, 500.0), (19.0, 1000.0), (20.0, 1000.0)])
        ]
        rec = shift_appliance("washer", energy, TARIFF, lookback_days=1.0, config=RecommendConfig())
        assert rec is not None
        assert math.isclose(rec.estimated_savings_per_week, 0.30 * 7, rel_tol=1e-9)

    def test_shift_below_threshold_silent(self):
        day0 = ms(2026, 1, 5)
        energy = [
            Measurement("washer", MetricKind.ENERGY_WH, v, day0 + int(h * 3_600_000), i)
            for i, (h, v) in enumerate([(17.0, 0.0), (18.0, 300.0)])
        ]
        assert shift_appliance("washer", energy, TARIFF, 1.0, RecommendConfig()) is None

    def test_adjust_setpoint_unoccupied_heating(self):
        day0 = ms(2026, 1, 5)
        # heater on 2000 W for 2 h (01:00-03:00) while unoccupied
        power = [
            Measurement("heater", MetricKind.POWER_W, p, day0 + h * 3_600_000, h)
            for h, p in enumerate((0.0, 2000.0, 2000.0, 0.0, 0.0))
        ]
        occupancy = OccupancyTrack([Measurement("occ", MetricKind.OCCUPANCY, 0.0, day0, 0)])
        rec = adjust_setpoint("heater", power, occupancy, TARIFF, 1.0, RecommendConfig())
        assert rec is not None
        # 4 kWh at 0.10 -> cost 0.40; 6%/deg * 2 deg = 12% -> 0.048/day
        assert math.isclose(rec.estimated_savings_per_week, 0.40 * 0.12 * 7, rel_tol=1e-9)
        assert rec.proposed_command.arg == 19.0

    def test_setpoint_short_stretch_ignored(self):
        day0 = ms(2026, 1, 5)
        power = [
            Measurement("heater", MetricKind.POWER_W, p, day0 + i * 600_000, i)
            for i, p in enumerate((2000.0, 0.0))  # only 10 minutes
        ]
        occupancy = OccupancyTrack([Measurement("occ", MetricKind.OCCUPANCY, 0.0, day0, 0)])
        assert adjust_setpoint("heater", power, occupancy, TARIFF, 1.0, RecommendConfig()) is None

    def test_reduce_lighting(self):
        day0 = ms(2026, 1, 5)
        power = [
            Measurement("lights", MetricKind.POWER_W, p, day0 + h * 3_600_000, h)
            for h, p in enumerate((100.0, 100.0, 0.0))
        ]
        occupancy = OccupancyTrack([Measurement("occ", MetricKind.OCCUPANCY, 0.0, day0, 0)])
        rec = reduce_lighting("lights", power, occupancy, TARIFF, 1.0, RecommendConfig())
        assert rec is not None
        # 200 Wh at 0.10/kWh = 0.02/day
        assert math.isclose(rec.estimated_savings_per_week, 0.02 * 7, rel_tol=1e-9)

    def test_occupied_home_silent(self):
        day0 = ms(2026, 1, 5)
        power = [
            Measurement("lights", MetricKind.POWER_W, 100.0, day0 + h * 3_600_000, h) for h in range(3)
        ]
        occupancy = OccupancyTrack([Measurement("occ", MetricKind.OCCUPANCY, 1.0, day0, 0)])
        assert reduce_lighting("lights", power, occupancy, TARIFF, 1.0, RecommendConfig()) is None
