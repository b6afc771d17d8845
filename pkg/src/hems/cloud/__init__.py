"""Cloud layer: ingestion, stores, timeseries queries, analytics, HTTP API."""

from .store import CloudStores, RegistryError
from .energy import EnergyBucket, Timeframe, energy_query
from .maintenance import MaintenanceAlert, MaintenanceConfig, analyze_maintenance, fit_line
from .recommend import Recommendation, RecommendConfig
from .service import CloudService, ServiceError
from .api import CloudApiServer

__all__ = [
    "CloudStores",
    "RegistryError",
    "EnergyBucket",
    "Timeframe",
    "energy_query",
    "MaintenanceAlert",
    "MaintenanceConfig",
    "analyze_maintenance",
    "fit_line",
    "Recommendation",
    "RecommendConfig",
    "CloudService",
    "ServiceError",
    "CloudApiServer",
]
