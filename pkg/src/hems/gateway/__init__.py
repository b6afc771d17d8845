"""Edge layer: the home gateway and its analytics."""

from .aggregate import AggregateRecord, aggregate_window
from .anomaly import AnomalyDetector, DetectorConfig
from .curtail import CurtailableDevice, CurtailmentPlan, PlanAction, plan_curtailment
from .flexsched import (
    FlexLoad,
    FlexSchedule,
    Infeasible,
    run_at_earliest,
    schedule_flexible_loads,
    tariff_slot_prices,
)
from .buffer import ForwardBuffer
from .forwarder import Forwarder
from .gateway import FleetEntry, GatewayConfig, HomeGateway

__all__ = [
    "AggregateRecord",
    "aggregate_window",
    "AnomalyDetector",
    "DetectorConfig",
    "CurtailableDevice",
    "CurtailmentPlan",
    "PlanAction",
    "plan_curtailment",
    "FlexLoad",
    "FlexSchedule",
    "Infeasible",
    "run_at_earliest",
    "schedule_flexible_loads",
    "tariff_slot_prices",
    "ForwardBuffer",
    "Forwarder",
    "FleetEntry",
    "GatewayConfig",
    "HomeGateway",
]
