"""Predictive maintenance as linear trend detection on daily indicators.

Two indicators per device, recomputed from raw rows: energy per duty
cycle per day (cycles counted as rising edges of the power series) and
daily baseline (minimum) power. An ordinary least-squares line is fitted
over the daily points; a device alerts when the slope exceeds a
configured fraction of the fitted intercept per day, and the breach date
is where the line crosses intercept * (1 + margin).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from ..model import Measurement
from .energy import day_start


@dataclass(frozen=True)
class MaintenanceConfig:
    min_points: int = 7
    slope_threshold_frac: float = 0.01  # per day, of the fitted intercept
    breach_margin: float = 0.25


@dataclass(frozen=True)
class MaintenanceAlert:
    device_id: str
    indicator: str  # "energy_per_cycle" | "baseline_power"
    slope_per_day: float
    intercept: float
    r_squared: float
    n_points: int
    projected_breach_ms: int
    confidence_note: str

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "indicator": self.indicator,
            "slope_per_day": self.slope_per_day,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "projected_breach_ms": self.projected_breach_ms,
            "confidence_note": self.confidence_note,
        }


def fit_line(points: Sequence[Tuple[float, float]]) -> Tuple[float, float, float]:
    """Least squares (slope, intercept, r^2) via the normal equations."""
    n = len(points)
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    mean_x = math.fsum(xs) / n
    mean_y = math.fsum(ys) / n
    sxx = math.fsum((x - mean_x) ** 2 for x in xs)
    sxy = math.fsum((x - mean_x) * (y - mean_y) for x, y in points)
    if sxx == 0.0:
        return 0.0, mean_y, 0.0
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    syy = math.fsum((y - mean_y) ** 2 for y in ys)
    r2 = 0.0 if syy == 0.0 else (sxy * sxy) / (sxx * syy)
    return slope, intercept, r2


def analyze_maintenance(
    device_id: str,
    indicator: str,
    daily_points: Sequence[Tuple[int, float]],  # (day_start_ms, value)
    config: MaintenanceConfig = MaintenanceConfig(),
) -> Optional[MaintenanceAlert]:
    if len(daily_points) < config.min_points:
        return None
    daily_points = sorted(daily_points)
    origin_ms = daily_points[0][0]
    xy = [((ms - origin_ms) / 86_400_000.0, value) for ms, value in daily_points]
    slope, intercept, r2 = fit_line(xy)
    if intercept <= 0.0 or slope <= config.slope_threshold_frac * intercept:
        return None
    breach_days = config.breach_margin * intercept / slope
    return MaintenanceAlert(
        device_id=device_id,
        indicator=indicator,
        slope_per_day=slope,
        intercept=intercept,
        r_squared=r2,
        n_points=len(daily_points),
        projected_breach_ms=origin_ms + int(breach_days * 86_400_000),
        confidence_note=f"ols over {len(daily_points)} daily points, r2={r2:.4f}",
    )


def energy_per_cycle_by_day(
    power_rows: Sequence[Measurement], energy_rows: Sequence[Measurement]
) -> List[Tuple[int, float]]:
    """Daily energy delta divided by that day's duty-cycle count."""
    cycles: Dict[int, int] = {}
    previous_on = False
    for row in power_rows:
        on = row.value > 0.0
        if on and not previous_on:
            day = day_start(row.timestamp)
            cycles[day] = cycles.get(day, 0) + 1
        previous_on = on

    deltas: Dict[int, float] = {}
    baseline: Optional[float] = None
    current_day: Optional[int] = None
    first = last = 0.0
    for row in energy_rows:
        day = day_start(row.timestamp)
        if day != current_day:
            if current_day is not None:
                start = baseline if baseline is not None else first
                deltas[current_day] = last - start
                baseline = last
            current_day = day
            first = row.value
        last = row.value
    if current_day is not None:
        start = baseline if baseline is not None else first
        deltas[current_day] = last - start

    return [
        (day, deltas[day] / cycles[day])
        for day in sorted(deltas)
        if cycles.get(day)
    ]


def baseline_power_by_day(power_rows: Sequence[Measurement]) -> List[Tuple[int, float]]:
    by_day: Dict[int, float] = {}
    for row in power_rows:
        day = day_start(row.timestamp)
        by_day[day] = min(by_day.get(day, row.value), row.value)
    return sorted(by_day.items())
