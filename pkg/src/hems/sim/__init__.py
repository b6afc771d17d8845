"""Physical device layer: simulated meters, sensors, and controllers."""

from .devices import (
    Behavior,
    BaselineLoad,
    CyclerLoad,
    DeviceState,
    EvCharger,
    FaultKind,
    FaultSpec,
    HumiditySensor,
    InapplicableFault,
    LightSensor,
    OccupancySensor,
    PvGenerator,
    ScheduledLoad,
    TemperatureSensor,
    Thermostat,
    UnsupportedAction,
    apply_command,
    inject_fault,
    new_state,
    queue_command,
    step_device,
)
from .scenario import HouseholdScenario, DeviceSpec, FlexLoadSpec, load_scenario, scenario_from_dict
from .fleet import Fleet, FleetRun, run_fleet

__all__ = [
    "Behavior",
    "BaselineLoad",
    "CyclerLoad",
    "DeviceState",
    "EvCharger",
    "FaultKind",
    "FaultSpec",
    "HumiditySensor",
    "InapplicableFault",
    "LightSensor",
    "OccupancySensor",
    "PvGenerator",
    "ScheduledLoad",
    "TemperatureSensor",
    "Thermostat",
    "UnsupportedAction",
    "apply_command",
    "inject_fault",
    "new_state",
    "queue_command",
    "step_device",
    "HouseholdScenario",
    "DeviceSpec",
    "FlexLoadSpec",
    "load_scenario",
    "scenario_from_dict",
    "Fleet",
    "FleetRun",
    "run_fleet",
]
