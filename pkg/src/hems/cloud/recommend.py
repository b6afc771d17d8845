"""Energy-saving recommendations from stored telemetry.

Three rules, each anchored on a registry hint:

- shift_appliance: a flexible-tagged device burned enough energy inside
  peak tariff windows; moving it to the cheapest band saves
  energy * (band price - cheapest price).
- adjust_setpoint: a heating-tagged device ran while the home (or its
  room) was unoccupied for a sustained stretch; setting back by a couple
  of degrees saves a configured percentage per degree of that energy.
- reduce_lighting: a lighting-tagged device drew power with nobody home;
  switching it off saves that energy at the band price.

Savings are reported per week, scaled from the lookback window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from ..model import (
    ActionKind,
    CommandOrigin,
    ControlCommand,
    Measurement,
    TariffSchedule,
    validate_command,
)


@dataclass(frozen=True)
class RecommendConfig:
    min_peak_wh: float = 500.0
    unoccupied_minutes: int = 30
    setback_c: float = 2.0
    pct_per_degree: float = 0.06
    default_setpoint_c: float = 21.0


@dataclass
class Recommendation:
    recommendation_id: str
    kind: str  # "shift_appliance" | "adjust_setpoint" | "reduce_lighting"
    device_id: str
    rationale: str
    estimated_savings_per_week: float
    proposed_command: Optional[ControlCommand]
    proposed_change: dict
    status: str = "proposed"

    def to_dict(self) -> dict:
        out = {
            "recommendation_id": self.recommendation_id,
            "kind": self.kind,
            "device_id": self.device_id,
            "rationale": self.rationale,
            "estimated_savings_per_week": self.estimated_savings_per_week,
            "proposed_change": self.proposed_change,
            "status": self.status,
        }
        if self.proposed_command is not None:
            out["proposed_command"] = {
                "action": self.proposed_command.action.value,
                "arg": self.proposed_command.arg,
            }
        return out


class OccupancyTrack:
    """Step function over occupancy readings; unknown means occupied."""

    def __init__(self, rows: Sequence[Measurement]):
        self._points = [(m.timestamp, m.value) for m in rows]

    def occupied_at(self, ts: int) -> bool:
        value = None
        for point_ts, point_value in self._points:
            if point_ts > ts:
                break
            value = point_value
        return True if value is None else value > 0.0


def _hour_of(ts: int) -> float:
    return (ts % 86_400_000) / 3_600_000.0


def _interval_energy_cost(
    power_rows: Sequence[Measurement],
    tariff: TariffSchedule,
    qualify,
    min_span_ms: int = 0,
) -> Tuple[float, float]:
    """(energy_wh, cost) over sample intervals where ``qualify`` holds.

    Power is piecewise-constant between samples; an interval's span runs
    to the next sample. Spans shorter than ``min_span_ms`` of contiguous
    qualification are skipped.
    """
    spans: List[List[Tuple[int, int, float]]] = []
    current: List[Tuple[int, int, float]] = []
    for i in range(len(power_rows) - 1):
        row = power_rows[i]
        dt = power_rows[i + 1].timestamp - row.timestamp
        if dt <= 0:
            continue
        if row.value > 0.0 and qualify(row.timestamp):
            current.append((row.timestamp, dt, row.value))
        elif current:
            spans.append(current)
            current = []
    if current:
        spans.append(current)

    energy = 0.0
    cost = 0.0
    for span in spans:
        span_ms = sum(dt for _, dt, _ in span)
        if span_ms < min_span_ms:
            continue
        for ts, dt, power in span:
            wh = power * dt / 3_600_000.0
            energy += wh
            cost += wh / 1000.0 * tariff.price_at_hour(_hour_of(ts))
    return energy, cost


def shift_appliance(
    device_id: str,
    energy_rows: Sequence[Measurement],
    tariff: TariffSchedule,
    lookback_days: float,
    config: RecommendConfig,
) -> Optional[Recommendation]:
    if not tariff.peak_windows or len(energy_rows) < 2:
        return None
    cheapest = tariff.cheapest_price()
    peak_wh = 0.0
    savings = 0.0
    for i in range(len(energy_rows) - 1):
        start = energy_rows[i]
        delta = energy_rows[i + 1].value - start.value
        if delta <= 0.0 or not tariff.in_peak_window(_hour_of(start.timestamp)):
            continue
        peak_wh += delta
        savings += delta / 1000.0 * (tariff.price_at_hour(_hour_of(start.timestamp)) - cheapest)
    if peak_wh < config.min_peak_wh:
        return None
    per_day = savings / lookback_days
    cheapest_band = min(tariff.bands, key=lambda b: (b.price_per_kwh, b.start_hour))
    return Recommendation(
        recommendation_id=f"shift_appliance-{device_id}",
        kind="shift_appliance",
        device_id=device_id,
        rationale=(
            f"{peak_wh:.0f} Wh used inside peak tariff windows over the last "
            f"{lookback_days:.0f} day(s); running it from {cheapest_band.start_hour}:00 "
            f"would cost {cheapest:.2f}/kWh instead"
        ),
        estimated_savings_per_week=per_day * 7.0,
        proposed_command=None,
        proposed_change={"suggested_start_hour": cheapest_band.start_hour},
    )


def adjust_setpoint(
    device_id: str,
    power_rows: Sequence[Measurement],
    occupancy: OccupancyTrack,
    tariff: TariffSchedule,
    lookback_days: float,
    config: RecommendConfig,
    current_setpoint_c: Optional[float] = None,
) -> Optional[Recommendation]:
    energy, cost = _interval_energy_cost(
        power_rows,
        tariff,
        qualify=lambda ts: not occupancy.occupied_at(ts),
        min_span_ms=config.unoccupied_minutes * 60_000,
    )
    if energy <= 0.0:
        return None
    saved = cost * config.pct_per_degree * config.setback_c
    setpoint = current_setpoint_c if current_setpoint_c is not None else config.default_setpoint_c
    target = max(5.0, setpoint - config.setback_c)
    cmd = ControlCommand(
        command_id=f"rec-setpoint-{device_id}",
        device_id=device_id,
        action=ActionKind.SET_SETPOINT_C,
        origin=CommandOrigin.CLOUD,
        issued_at=0,
        arg=target,
    )
    assert validate_command(cmd).ok
    return Recommendation(
        recommendation_id=f"adjust_setpoint-{device_id}",
        kind="adjust_setpoint",
        device_id=device_id,
        rationale=(
            f"heating ran for {energy:.0f} Wh while unoccupied for stretches of "
            f">= {config.unoccupied_minutes} min; a {config.setback_c:.0f} degree setback "
            f"saves about {config.pct_per_degree * 100:.0f}% per degree"
        ),
        estimated_savings_per_week=saved / lookback_days * 7.0,
        proposed_command=cmd,
        proposed_change={"setpoint_c": target},
    )


def reduce_lighting(
    device_id: str,
    power_rows: Sequence[Measurement],
    occupancy: OccupancyTrack,
    tariff: TariffSchedule,
    lookback_days: float,
    config: RecommendConfig,
) -> Optional[Recommendation]:
    energy, cost = _interval_energy_cost(
        power_rows, tariff, qualify=lambda ts: not occupancy.occupied_at(ts)
    )
    if energy <= 0.0:
        return None
    cmd = ControlCommand(
        command_id=f"rec-lighting-{device_id}",
        device_id=device_id,
        action=ActionKind.SWITCH_OFF,
        origin=CommandOrigin.CLOUD,
        issued_at=0,
    )
    assert validate_command(cmd).ok
    return Recommendation(
        recommendation_id=f"reduce_lighting-{device_id}",
        kind="reduce_lighting",
        device_id=device_id,
        rationale=f"lighting drew {energy:.0f} Wh while the home was unoccupied",
        estimated_savings_per_week=cost / lookback_days * 7.0,
        proposed_command=cmd,
        proposed_change={"automation": "switch_off_when_unoccupied"},
    )
