"""Windowed aggregation of the telemetry stream.

Windows are aligned to UTC multiples of the window length. Home-level
power is the per-timestamp sum across devices (so a home's mean is the
sum of device means when devices sample in lockstep), and home-level
energy deltas add device deltas. Only additive metrics get home records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

from ..model import Measurement, MetricKind

_HOME_METRICS = (MetricKind.POWER_W, MetricKind.ENERGY_WH)


@dataclass(frozen=True)
class AggregateRecord:
    scope: str
    metric: MetricKind
    window_start: int
    window_end: int
    sum: float
    mean: float
    min: float
    max: float
    sample_count: int
    energy_wh_delta: Optional[float] = None

    def to_dict(self) -> dict:
        out = {
            "scope": self.scope,
            "metric": self.metric.value,
            "window_start": self.window_start,
            "window_end": self.window_end,
            "sum": self.sum,
            "mean": self.mean,
            "min": self.min,
            "max": self.max,
            "sample_count": self.sample_count,
        }
        if self.energy_wh_delta is not None:
            out["energy_wh_delta"] = self.energy_wh_delta
        return out


def _stats(values: List[float]) -> Tuple[float, float, float, float]:
    total = math.fsum(values)
    return total, total / len(values), min(values), max(values)


def aggregate_window(
    measurements: Iterable[Measurement],
    window_seconds: int,
    home_id: Optional[str] = None,
) -> List[AggregateRecord]:
    """One record per (scope, metric, window) that saw at least one sample."""
    if window_seconds <= 0:
        raise ValueError("window_seconds must be positive")
    window_ms = window_seconds * 1000

    by_series: Dict[Tuple[str, MetricKind], List[Measurement]] = {}
    for m in measurements:
        by_series.setdefault((m.device_id, m.metric), []).append(m)

    records: List[AggregateRecord] = []
    home_samples: Dict[Tuple[MetricKind, int], Dict[int, float]] = {}
    home_energy: Dict[int, List[float]] = {}

    for (device_id, metric), series in sorted(by_series.items()):
        series.sort(key=lambda m: (m.timestamp, m.seq))
        windows: Dict[int, List[Measurement]] = {}
        for m in series:
            windows.setdefault(m.timestamp // window_ms, []).append(m)
        baseline: Optional[float] = None
        for idx in sorted(windows):
            samples = windows[idx]
            values = [m.value for m in samples]
            total, mean, lo, hi = _stats(values)
            delta = None
            if metric is MetricKind.ENERGY_WH:
                last = samples[-1].value
                start = baseline if baseline is not None else samples[0].value
                delta = last - start
                baseline = last
                home_energy.setdefault(idx, []).append(delta)
            records.append(
                AggregateRecord(
                    scope=device_id,
                    metric=metric,
                    window_start=idx * window_ms,
                    window_end=(idx + 1) * window_ms,
                    sum=total,
                    mean=mean,
                    min=lo,
                    max=hi,
                    sample_count=len(values),
                    energy_wh_delta=delta,
                )
            )
            if home_id is not None and metric in _HOME_METRICS:
                bucket = home_samples.setdefault((metric, idx), {})
                for m in samples:
                    bucket[m.timestamp] = bucket.get(m.timestamp, 0.0) + m.value

    if home_id is not None:
        for (metric, idx), by_ts in sorted(home_samples.items()):
            values = [by_ts[ts] for ts in sorted(by_ts)]
            total, mean, lo, hi = _stats(values)
            delta = math.fsum(home_energy.get(idx, [])) if metric is MetricKind.ENERGY_WH else None
            records.append(
                AggregateRecord(
                    scope=home_id,
                    metric=metric,
                    window_start=idx * window_ms,
                    window_end=(idx + 1) * window_ms,
                    sum=total,
                    mean=mean,
                    min=lo,
                    max=hi,
                    sample_count=len(values),
                    energy_wh_delta=delta,
                )
            )

    records.sort(key=lambda r: (r.scope, r.metric.value, r.window_start))
    return records
