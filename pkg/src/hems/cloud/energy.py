"""Calendar-aligned energy queries over cumulative meter readings.

Buckets align to the UTC calendar (weeks start Monday). The hourly level
is computed from cumulative readings as last-in-bucket minus
last-before-bucket (first reading ever seeds the baseline); every coarser
timeframe is the exact float sum (math.fsum) of its constituent finer
buckets, and a home bucket is the sum of its device buckets — so
hourly->daily->weekly/monthly->yearly consistency holds bit-for-bit by
construction. Buckets without samples are omitted, never zero-filled.
"""

from __future__ import annotations

import calendar
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from ..model import Measurement, MetricKind


class Timeframe(str, Enum):
    HOURLY = "hourly"
    DAILY = "daily"
    WEEKLY = "weekly"
    MONTHLY = "monthly"
    YEARLY = "yearly"


@dataclass(frozen=True)
class EnergyBucket:
    scope: str
    timeframe: Timeframe
    start_ms: int
    end_ms: int
    energy_wh: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "timeframe": self.timeframe.value,
            "window_start": self.start_ms,
            "window_end": self.end_ms,
            "energy_wh": self.energy_wh,
            "sample_count": self.sample_count,
        }


def _utc(ms: int) -> datetime:
    return datetime.fromtimestamp(ms / 1000.0, tz=timezone.utc)


def _ms(dt: datetime) -> int:
    return int(dt.timestamp() * 1000)


def hour_start(ms: int) -> int:
    return ms - ms % 3_600_000


def day_start(ms: int) -> int:
    dt = _utc(ms)
    return _ms(dt.replace(hour=0, minute=0, second=0, microsecond=0))


def week_start(ms: int) -> int:
    dt = _utc(ms).replace(hour=0, minute=0, second=0, microsecond=0)
    return _ms(dt - timedelta(days=dt.weekday()))  # Monday

def month_start(ms: int) -> int:
    dt = _utc(ms)
    return _ms(dt.replace(day=1, hour=0, minute=0, second=0, microsecond=0))


def year_start(ms: int) -> int:
    dt = _utc(ms)
    return _ms(dt.replace(month=1, day=1, hour=0, minute=0, second=0, microsecond=0))


def bucket_end(start_ms: int, timeframe: Timeframe) -> int:
    if timeframe is Timeframe.HOURLY:
        return start_ms + 3_600_000
    dt = _utc(start_ms)
    if timeframe is Timeframe.DAILY:
        return _ms(dt + timedelta(days=1))
    if timeframe is Timeframe.WEEKLY:
        return _ms(dt + timedelta(days=7))
    if timeframe is Timeframe.MONTHLY:
        days = calendar.monthrange(dt.year, dt.month)[1]
        return _ms(dt + timedelta(days=days))
    return _ms(dt.replace(year=dt.year + 1))


_BUCKET_FN = {
    Timeframe.HOURLY: hour_start,
    Timeframe.DAILY: day_start,
    Timeframe.WEEKLY: week_start,
    Timeframe.MONTHLY: month_start,
    Timeframe.YEARLY: year_start,
}

# each coarser timeframe sums buckets of this finer one
_FINER = {
    Timeframe.DAILY: Timeframe.HOURLY,
    Timeframe.WEEKLY: Timeframe.DAILY,
    Timeframe.MONTHLY: Timeframe.DAILY,
    Timeframe.YEARLY: Timeframe.MONTHLY,
}


def device_hourly(rows: Sequence[Measurement]) -> Dict[int, Tuple[float, int]]:
    """hour start -> (delta_wh, sample_count) from cumulative readings.

    Delta is last-in-bucket minus last-before-bucket; the very first
    reading seeds the baseline, so a device's first bucket counts only
    energy accumulated after its first report.
    """
    out: Dict[int, Tuple[float, int]] = {}
    baseline: Optional[float] = None
    current_hour: Optional[int] = None
    first_in_bucket = 0.0
    last_value = 0.0
    count = 0
    for row in rows:  # rows sorted by (timestamp, seq)
        hour = hour_start(row.timestamp)
        if hour != current_hour:
            if current_hour is not None:
                start = baseline if baseline is not None else first_in_bucket
                out[current_hour] = (last_value - start, count)
                baseline = last_value
            current_hour = hour
            count = 0
            first_in_bucket = row.value
        last_value = row.value
        count += 1
    if current_hour is not None:
        start = baseline if baseline is not None else first_in_bucket
        out[current_hour] = (last_value - start, count)
    return out


def rollup(
    finer: Dict[int, Tuple[float, int]], timeframe: Timeframe
) -> Dict[int, Tuple[float, int]]:
    if timeframe is Timeframe.HOURLY:
        return dict(finer)
    groups: Dict[int, List[Tuple[float, int]]] = {}
    for start, (delta, count) in finer.items():
        groups.setdefault(_BUCKET_FN[timeframe](start), []).append((delta, count))
    return {
        start: (math.fsum(d for d, _ in parts), sum(c for _, c in parts))
        for start, parts in groups.items()
    }


def _chain(buckets: Dict[int, Tuple[float, int]], timeframe: Timeframe) -> Dict[int, Tuple[float, int]]:
    chain = []
    tf = timeframe
    while tf is not Timeframe.HOURLY:
        chain.append(tf)
        tf = _FINER[tf]
    for tf in reversed(chain):
        buckets = rollup(buckets, tf)
    return buckets


def device_buckets(rows: Sequence[Measurement], timeframe: Timeframe) -> Dict[int, Tuple[float, int]]:
    return _chain(device_hourly(rows), timeframe)


def home_hourly(series_by_device: Dict[str, Sequence[Measurement]]) -> Dict[int, Tuple[float, int]]:
    """Home hourly deltas: the sum of the device hourly deltas."""
    merged: Dict[int, List[Tuple[float, int]]] = {}
    for device in sorted(series_by_device):
        for start, pair in device_hourly(series_by_device[device]).items():
            merged.setdefault(start, []).append(pair)
    return {
        start: (math.fsum(d for d, _ in parts), sum(c for _, c in parts))
        for start, parts in merged.items()
    }


def energy_query(
    series_by_device: Dict[str, Sequence[Measurement]],
    scope: str,
    timeframe: Timeframe,
    from_ms: Optional[int] = None,
    to_ms: Optional[int] = None,
    home_scope: bool = False,
) -> List[EnergyBucket]:
    """Buckets for one device, or for the home as a virtual summed device.

    The home series is bucketed through the same hourly->coarser chain as
    a device, so timeframe consistency holds exactly at every scope.
    """
    if home_scope:
        combined = _chain(home_hourly(series_by_device), timeframe)
    else:
        combined = device_buckets(series_by_device.get(scope, ()), timeframe)

    out = []
    for start in sorted(combined):
        end = bucket_end(start, timeframe)
        if from_ms is not None and end <= from_ms:
            continue
        if to_ms is not None and start >= to_ms:
            continue
        delta, count = combined[start]
        out.append(EnergyBucket(scope, timeframe, start, end, delta, count))
    return out
