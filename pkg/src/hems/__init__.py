"""Desk-scale home energy management stack.

Layers, bottom to top: simulated devices (``hems.sim``) speaking MQTT,
CoAP, or HTTP (``hems.adapters``); an edge gateway doing aggregation,
anomaly detection, demand response, load shifting, and store-and-forward
(``hems.gateway``); and a cloud HTTP API with timeseries queries,
maintenance trends, and recommendations (``hems.cloud``). ``hems.cli``
runs them separately or wired together against a scenario file.
"""

__version__ = "0.1.0"
