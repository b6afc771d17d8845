"""Demand-response curtailment planning.

Greedy and fully deterministic: curtailable devices sorted by ascending
priority rank (rank 0 is protected and never appears in a plan), ties
broken by larger current draw and then device id, curtailed until the
target is met or devices run out. Batteries contribute their current
draw plus their rated discharge; an unreachable target yields a plan
covering every curtailable device plus a warning event.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

from ..model import (
    ActionKind,
    CommandOrigin,
    ControlCommand,
    DrSignal,
    Event,
    EventKind,
    Severity,
)


@dataclass(frozen=True)
class CurtailableDevice:
    """Fleet-snapshot view of one device, as the planner sees it."""

    device_id: str
    power_w: float
    rank: int
    can_switch_off: bool = True
    has_charge_rate: bool = False
    v2g_discharge_w: float = 0.0


@dataclass(frozen=True)
class PlanAction:
    device_id: str
    command: ControlCommand
    expected_reduction_w: float


@dataclass(frozen=True)
class CurtailmentPlan:
    signal_id: str
    actions: Tuple[PlanAction, ...]
    achieved_reduction_w: float
    restore_at: int
    target_met: bool


def plan_curtailment(
    signal: DrSignal,
    devices: List[CurtailableDevice],
    now_ms: int,
    origin: CommandOrigin = CommandOrigin.EDGE,
) -> Tuple[CurtailmentPlan, Optional[Event]]:
    """Returns the plan and, when the target is unreachable, a warning event."""
    candidates = [
        d
        for d in devices
        if d.rank > 0 and (d.power_w + d.v2g_discharge_w) > 0.0
        and (d.can_switch_off or d.has_charge_rate)
    ]
    candidates.sort(key=lambda d: (d.rank, -d.power_w, d.device_id))

    actions: List[PlanAction] = []
    achieved = 0.0
    for device in candidates:
        if achieved >= signal.target_reduction_w:
            break
        reduction = device.power_w + device.v2g_discharge_w
        if device.has_charge_rate:
            arg = -device.v2g_discharge_w if device.v2g_discharge_w > 0.0 else 0.0
            action, action_arg = ActionKind.SET_CHARGE_RATE_W, arg
        else:
            action, action_arg = ActionKind.SWITCH_OFF, None
        cmd = ControlCommand(
            command_id=f"curtail-{signal.signal_id}-{device.device_id}",
            device_id=device.device_id,
            action=action,
            origin=origin,
            issued_at=now_ms,
            arg=action_arg,
        )
        actions.append(PlanAction(device.device_id, cmd, reduction))
        achieved += reduction

    target_met = achieved >= signal.target_reduction_w
    plan = CurtailmentPlan(
        signal_id=signal.signal_id,
        actions=tuple(actions),
        achieved_reduction_w=achieved,
        restore_at=signal.window_end,
        target_met=target_met,
    )
    warning = None
    if not target_met:
        warning = Event(
            event_id=f"dr-shortfall-{signal.signal_id}",
            kind=EventKind.SYSTEM_ALERT,
            severity=Severity.WARNING,
            source="gateway",
            timestamp=now_ms,
            payload={
                "signal_id": signal.signal_id,
                "target_reduction_w": signal.target_reduction_w,
                "achieved_reduction_w": achieved,
                "reason": "target unreachable with curtailable devices",
            },
        )
    return plan, warning
