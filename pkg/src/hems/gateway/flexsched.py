"""Shifting deferrable loads to cheap tariff slots.

Without a peak cap each load is independent, so assigning every load its
cheapest feasible start (earliest on ties) is exactly optimal. Under a
peak cap the loads are placed greedily by descending energy with
depth-first backtracking over cost-ordered starts; the result is then
compared against the run-at-earliest baseline and the cheaper of the two
is returned, so a capped schedule never costs more than just running
everything as early as allowed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from ..model import TariffSchedule


class Infeasible(Exception):
    def __init__(self, load_id: str, message: str = ""):
        super().__init__(message or f"load {load_id} cannot be scheduled")
        self.load_id = load_id


@dataclass(frozen=True)
class FlexLoad:
    load_id: str
    power_w: float
    duration_slots: int
    earliest_slot: int
    latest_slot: int  # latest allowed *start* slot


@dataclass(frozen=True)
class FlexSchedule:
    assignments: Tuple[Tuple[str, int], ...]  # (load_id, start_slot)
    slot_seconds: int
    total_cost: float
    peak_w: float


def tariff_slot_prices(
    tariff: TariffSchedule, slot_seconds: int, n_slots: int, start_hour: float = 0.0
) -> List[float]:
    """Price per kWh for each slot, from the slot's starting hour of day."""
    prices = []
    for slot in range(n_slots):
        hour = (start_hour + slot * slot_seconds / 3600.0) % 24.0
        prices.append(tariff.price_at_hour(hour))
    return prices


def _slot_cost(load: FlexLoad, start: int, prices: Sequence[float], slot_seconds: int) -> float:
    kwh_per_slot = load.power_w / 1000.0 * slot_seconds / 3600.0
    return math.fsum(prices[start + k] * kwh_per_slot for k in range(load.duration_slots))


def _feasible_starts(load: FlexLoad, n_slots: int) -> List[int]:
    last = min(load.latest_slot, n_slots - load.duration_slots)
    return list(range(load.earliest_slot, last + 1))


def _validate(loads: Sequence[FlexLoad], n_slots: int) -> None:
    for load in loads:
        if load.duration_slots <= 0 or load.power_w < 0:
            raise Infeasible(load.load_id, f"load {load.load_id} has invalid shape")
        if load.earliest_slot < 0 or load.latest_slot < load.earliest_slot:
            raise Infeasible(load.load_id, f"load {load.load_id} window is empty")
        if not _feasible_starts(load, n_slots):
            raise Infeasible(load.load_id, f"load {load.load_id} does not fit its window")


def _schedule_stats(
    loads: Sequence[FlexLoad],
    starts: Dict[str, int],
    prices: Sequence[float],
    slot_seconds: int,
    n_slots: int,
) -> Tuple[float, float]:
    usage = [0.0] * n_slots
    for load in loads:
        for k in range(load.duration_slots):
            usage[starts[load.load_id] + k] += load.power_w
    cost = math.fsum(_slot_cost(load, starts[load.load_id], prices, slot_seconds) for load in loads)
    return cost, max(usage, default=0.0)


def run_at_earliest(
    loads: Sequence[FlexLoad], prices: Sequence[float], slot_seconds: int
) -> Tuple[Dict[str, int], float, float]:
    """Baseline: every load starts as early as its window allows."""
    n_slots = len(prices)
    starts = {load.load_id: load.earliest_slot for load in loads}
    cost, peak = _schedule_stats(loads, starts, prices, slot_seconds, n_slots)
    return starts, cost, peak


def schedule_flexible_loads(
    loads: Sequence[FlexLoad],
    prices: Sequence[float],
    slot_seconds: int,
    peak_cap_w: Optional[float] = None,
) -> FlexSchedule:
    n_slots = len(prices)
    _validate(loads, n_slots)
    if not loads:
        return FlexSchedule(assignments=(), slot_seconds=slot_seconds, total_cost=0.0, peak_w=0.0)

    if peak_cap_w is None:
        starts: Dict[str, int] = {}
        for load in loads:
            options = [(_slot_cost(load, s, prices, slot_seconds), s)
                       for s in _feasible_starts(load, n_slots)]
            starts[load.load_id] = min(options)[1]
        cost, peak = _schedule_stats(loads, starts, prices, slot_seconds, n_slots)
        assignments = tuple(sorted(starts.items()))
        return FlexSchedule(assignments, slot_seconds, cost, peak)

    ordered = sorted(loads, key=lambda l: (-l.power_w * l.duration_slots, l.load_id))
    options_by_load = {
        load.load_id: sorted(
            (_slot_cost(load, s, prices, slot_seconds), s)
            for s in _feasible_starts(load, n_slots)
        )
        for load in ordered
    }
    usage = [0.0] * n_slots
    chosen: Dict[str, int] = {}
    deepest_failure = 0

    def fits(load: FlexLoad, start: int) -> bool:
        return all(usage[start + k] + load.power_w <= peak_cap_w for k in range(load.duration_slots))

    def place(load: FlexLoad, start: int, sign: float) -> None:
        for k in range(load.duration_slots):
            usage[start + k] += sign * load.power_w

    def dfs(index: int) -> bool:
        nonlocal deepest_failure
        if index == len(ordered):
            return True
        load = ordered[index]
        for _, start in options_by_load[load.load_id]:
            if not fits(load, start):
                continue
            place(load, start, +1.0)
            chosen[load.load_id] = start
            if dfs(index + 1):
                return True
            del chosen[load.load_id]
            place(load, start, -1.0)
        deepest_failure = max(deepest_failure, index)
        return False

    if not dfs(0):
        raise Infeasible(ordered[deepest_failure].load_id)

    cost, peak = _schedule_stats(loads, chosen, prices, slot_seconds, n_slots)
    earliest_starts, earliest_cost, earliest_peak = run_at_earliest(loads, prices, slot_seconds)
    if earliest_peak <= peak_cap_w and earliest_cost < cost:
        chosen, cost, peak = earliest_starts, earliest_cost, earliest_peak
    assignments = tuple(sorted(chosen.items()))
    return FlexSchedule(assignments, slot_seconds, cost, peak)
