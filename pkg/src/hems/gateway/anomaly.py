"""Rule-based fault detectors running against the live telemetry stream.

Three detectors:

- stuck sensor: N consecutive bitwise-identical readings of a continuous
  sensor metric (one event per stuck episode, fired exactly at the Nth);
- phantom load: power above a threshold while the device's last known
  switch state is off (fired on the first qualifying sample);
- outlier: rolling z-score of a continuous sensor metric against the
  preceding full window, emitted only when the window's sigma is positive.

Binary and cumulative metrics (occupancy, energy) and switching loads are
excluded from the stuck/outlier rules: duty-cycled power is legitimately
constant-then-jumping, which is exactly what those rules would flag.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Tuple

from ..model import Event, EventKind, Measurement, MetricKind, Severity

CONTINUOUS_SENSOR_METRICS = frozenset(
    {MetricKind.TEMPERATURE_C, MetricKind.HUMIDITY_PCT, MetricKind.LIGHT_LUX}
)


@dataclass(frozen=True)
class DetectorConfig:
    stuck_window: int = 30
    phantom_threshold_w: float = 5.0
    zscore_window: int = 120
    zscore_limit: float = 4.0


class AnomalyDetector:
    """Streaming detector; degrades to silence on insufficient history."""

    def __init__(
        self,
        config: DetectorConfig,
        switch_state: Optional[Callable[[str], Optional[bool]]] = None,
    ):
        self.config = config
        self.switch_state = switch_state or (lambda device_id: None)
        self._runs: Dict[Tuple[str, MetricKind], Tuple[float, int]] = {}
        self._stuck_fired: Dict[Tuple[str, MetricKind], bool] = {}
        self._phantom_active: Dict[str, bool] = {}
        self._windows: Dict[Tuple[str, MetricKind], Deque[float]] = {}

    def observe(self, m: Measurement) -> List[Event]:
        events: List[Event] = []
        if m.metric in CONTINUOUS_SENSOR_METRICS:
            stuck = self._check_stuck(m)
            if stuck:
                events.append(stuck)
            outlier = self._check_outlier(m)
            if outlier:
                events.append(outlier)
        elif m.metric is MetricKind.POWER_W:
            phantom = self._check_phantom(m)
            if phantom:
                events.append(phantom)
        return events

    def _event(self, detector: str, m: Measurement, payload: dict) -> Event:
        payload = {"detector": detector, "device_id": m.device_id, "metric": m.metric.value, **payload}
        return Event(
            event_id=f"anomaly-{detector}-{m.device_id}-{m.metric.value}-{m.timestamp}",
            kind=EventKind.ANOMALY,
            severity=Severity.WARNING,
            source=m.device_id,
            timestamp=m.timestamp,
            payload=payload,
        )

    def _check_stuck(self, m: Measurement) -> Optional[Event]:
        key = (m.device_id, m.metric)
        value, run = self._runs.get(key, (None, 0))
        run = run + 1 if value == m.value else 1
        self._runs[key] = (m.value, run)
        if run == 1:
            self._stuck_fired[key] = False
        if run >= self.config.stuck_window and not self._stuck_fired.get(key):
            self._stuck_fired[key] = True
            return self._event(
                "stuck_sensor",
                m,
                {"value": m.value, "run_length": run, "window": self.config.stuck_window},
            )
        return None

    def _check_phantom(self, m: Measurement) -> Optional[Event]:
        switched_on = self.switch_state(m.device_id)
        qualifying = switched_on is False and m.value > self.config.phantom_threshold_w
        if not qualifying:
            self._phantom_active[m.device_id] = False
            return None
        if self._phantom_active.get(m.device_id):
            return None
        self._phantom_active[m.device_id] = True
        return self._event(
            "phantom_load",
            m,
            {"power_w": m.value, "threshold_w": self.config.phantom_threshold_w},
        )

    def _check_outlier(self, m: Measurement) -> Optional[Event]:
        key = (m.device_id, m.metric)
        window = self._windows.get(key)
        if window is None:
            window = deque(maxlen=self.config.zscore_window)
            self._windows[key] = window
        event = None
        if len(window) == self.config.zscore_window:
            mean = math.fsum(window) / len(window)
            variance = math.fsum((v - mean) ** 2 for v in window) / len(window)
            sigma = math.sqrt(variance)
            if sigma > 0.0:
                z = (m.value - mean) / sigma
                if abs(z) > self.config.zscore_limit:
                    event = self._event(
                        "outlier",
                        m,
                        {
                            "value": m.value,
                            "zscore": z,
                            "window_mean": mean,
                            "window_sigma": sigma,
                            "limit": self.config.zscore_limit,
                        },
                    )
        window.append(m.value)
        return event
