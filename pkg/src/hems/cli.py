"""Operator entry point.

Subcommands:

- ``scenario run <file>``: devices + gateway + cloud in one process over
  loopback at max speed; writes the run report and exits nonzero if any
  run invariant was violated.
- ``all``: same wiring, but keeps the cloud API (and UI data) alive after
  the scenario finishes, for driving the dashboard by hand.
- ``cloud`` / ``gateway`` / ``sim``: run one layer standalone against the
  others over the network, from YAML config files.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import signal
import sys
import time

import yaml

from .cloud import CloudApiServer, CloudService
from .gateway import DetectorConfig, FleetEntry, GatewayConfig, HomeGateway
from .model import Protocol, TariffBand, TariffSchedule
from .runner import RunnerError, ScenarioRunner, render_report, summarize_report
from .sim.scenario import ScenarioError, load_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2


def _load_yaml(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"{path}: no such file") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"{path}: YAML parse error{where}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")
    return data


def _load_scenario_with_seed(path: str, seed):
    scenario = load_scenario(path)
    if seed is not None:
        scenario = dataclasses.replace(scenario, rng_seed=seed)
    return scenario


def cmd_scenario(args) -> int:
    scenario = _load_scenario_with_seed(args.scenario, args.seed)
    runner = ScenarioRunner(scenario, args.workdir, ports_base=args.ports, speed=args.speed)
    report = runner.run()
    text = render_report(report)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(summarize_report(report))
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def cmd_all(args) -> int:
    scenario = _load_scenario_with_seed(args.scenario, args.seed)
    runner = ScenarioRunner(scenario, args.workdir, ports_base=args.ports, speed=args.speed)
    report = runner.run(stop_cloud=False)
    print(summarize_report(report))
    print(f"cloud API serving on {runner.cloud_api.base_url()} (Ctrl+C to stop)")
    try:
        signal.pause()
    except (KeyboardInterrupt, AttributeError):
        pass
    finally:
        runner.cloud_api.stop()
        runner.cloud_service.close()
    return EXIT_OK if report["ok"] else EXIT_INVARIANT


def cmd_cloud(args) -> int:
    config = _load_yaml(args.config)
    cloud = config.get("cloud", {})
    service = CloudService(cloud.get("data_dir", "./cloud-data"))
    for home in cloud.get("homes", ()):
        tariff = None
        if "tariff" in home:
            tariff = TariffSchedule(
                bands=tuple(
                    TariffBand(b["start_hour"], b["end_hour"], b["price_per_kwh"])
                    for b in home["tariff"].get("bands", ())
                ),
                peak_windows=tuple(tuple(w) for w in home["tariff"].get("peak_windows", ())),
            )
        service.provision_home(
            home["home_id"], home["token"], rooms=home.get("rooms", ()), tariff=tariff
        )
    api = CloudApiServer(service, host=cloud.get("host", "127.0.0.1"), port=int(cloud.get("port", 8420)))
    api.start()
    print(f"cloud API on {api.base_url()} (Ctrl+C to stop)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        api.stop()
        service.close()
    return EXIT_OK


def _gateway_config(raw: dict) -> GatewayConfig:
    gw = raw.get("gateway", {})
    detector_raw = gw.get("detector", {})
    fleet = []
    for entry in gw.get("fleet", ()):
        fleet.append(
            FleetEntry(
                device_id=entry["device_id"],
                protocol=Protocol(entry.get("protocol", "http")),
                room=entry.get("room", ""),
                command_host=entry.get("command_host", "127.0.0.1"),
                command_port=int(entry.get("command_port", 0)),
                initial_switch_on=bool(entry.get("initial_switch_on", True)),
                rank=int(entry.get("rank", 1)),
                curtailable=bool(entry.get("curtailable", False)),
                has_charge_rate=bool(entry.get("has_charge_rate", False)),
                max_rate_w=float(entry.get("max_rate_w", 0.0)),
                v2g_discharge_w=float(entry.get("v2g_discharge_w", 0.0)),
                default_charge_rate_w=float(entry.get("default_charge_rate_w", 0.0)),
                tags=tuple(entry.get("tags", ())),
            )
        )
    try:
        return GatewayConfig(
            home_id=gw["home_id"],
            token=gw["token"],
            buffer_path=gw.get("buffer_path", "./gateway-buffer.jsonl"),
            host=gw.get("host", "127.0.0.1"),
            mqtt_port=int(gw.get("mqtt_port", 1883)),
            coap_port=int(gw.get("coap_port", 5683)),
            http_port=int(gw.get("http_port", 8421)),
            cloud_url=gw.get("cloud_url", ""),
            buffer_capacity=int(gw.get("buffer_capacity", 10_000)),
            detector=DetectorConfig(
                stuck_window=int(detector_raw.get("stuck_window", 30)),
                phantom_threshold_w=float(detector_raw.get("phantom_threshold_w", 5.0)),
                zscore_window=int(detector_raw.get("zscore_window", 120)),
                zscore_limit=float(detector_raw.get("zscore_limit", 4.0)),
            ),
            auto_mitigate=bool(gw.get("auto_mitigate", True)),
            window_seconds=int(gw.get("window_seconds", 60)),
            charge_on_export=bool(gw.get("charge_on_export", True)),
            fleet=tuple(fleet),
        )
    except KeyError as exc:
        raise ScenarioError(f"gateway config missing key {exc}") from None


def cmd_gateway(args) -> int:
    config = _gateway_config(_load_yaml(args.config))
    gateway = HomeGateway(config)
    gateway.start()
    print(f"gateway up: mqtt={gateway.ports['mqtt']} coap={gateway.ports['coap']} http={gateway.ports['http']}")
    try:
        while True:
            time.sleep(config.window_seconds)
            gateway.on_clock(int(time.time() * 1000))
    except KeyboardInterrupt:
        pass
    finally:
        gateway.stop()
    return EXIT_OK


def cmd_sim(args) -> int:
    from .adapters.hub import CoapDeviceLink, HttpDeviceLink, MqttDeviceLink, SharedCommandServer
    from .sim import Fleet

    scenario = _load_scenario_with_seed(args.scenario, args.seed)
    fleet = Fleet(scenario)
    command_server = SharedCommandServer(port=args.device_port)
    command_server.start()
    links = {}
    for spec in sorted(scenario.devices, key=lambda s: s.descriptor.device_id):
        did = spec.descriptor.device_id
        if spec.descriptor.protocol is Protocol.MQTT:
            link = MqttDeviceLink(scenario.home_id, did, scenario.auth_token, args.gateway_host, args.mqtt_port)
        elif spec.descriptor.protocol is Protocol.COAP:
            link = CoapDeviceLink(scenario.home_id, did, args.gateway_host, args.coap_port)
        else:
            link = HttpDeviceLink(
                scenario.home_id, did, scenario.auth_token, args.gateway_host, args.http_port, command_server
            )
        link.connect()
        links[did] = link
        print(f"device {did} ({spec.descriptor.protocol.value}) connected")
    try:
        for tick in range(scenario.n_ticks):
            for did in sorted(links):
                for cmd in links[did].drain_commands():
                    rejection = fleet.queue_command(cmd)
                    if rejection is not None:
                        links[did].send(rejection)
            measurements, events = fleet.step(tick)
            for envelope in events + measurements:
                source = getattr(envelope, "device_id", None) or envelope.source
                links[source].send(envelope)
            if args.speed == "realtime":
                time.sleep(scenario.tick_seconds)
    except KeyboardInterrupt:
        pass
    finally:
        for link in links.values():
            link.close()
        command_server.stop()
    print(f"simulated {scenario.n_ticks} ticks for {len(links)} devices")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hems", description="home energy management stack: simulator, gateway, cloud"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    scenario = sub.add_parser("scenario", help="run a scenario end-to-end and report")
    scenario_sub = scenario.add_subparsers(dest="scenario_command", required=True)
    run = scenario_sub.add_parser("run", help="run scenario to completion at max speed")
    run.add_argument("scenario", help="scenario YAML file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario rng seed")
    run.add_argument("--speed", choices=("max", "realtime"), default="max")
    run.add_argument("--report", default=None, help="write the JSON run report here")
    run.add_argument("--workdir", default="./run", help="working directory for stores")
    run.add_argument("--ports", type=int, default=None, help="base port (mqtt, +1 coap, +2 http, +3 cloud)")
    run.set_defaults(fn=cmd_scenario)

    everything = sub.add_parser("all", help="run a scenario, then keep the cloud API alive")
    everything.add_argument("scenario")
    everything.add_argument("--seed", type=int, default=None)
    everything.add_argument("--speed", choices=("max", "realtime"), default="realtime")
    everything.add_argument("--workdir", default="./run")
    everything.add_argument("--ports", type=int, default=None)
    everything.set_defaults(fn=cmd_all)

    cloud = sub.add_parser("cloud", help="run the cloud service standalone")
    cloud.add_argument("--config", required=True)
    cloud.set_defaults(fn=cmd_cloud)

    gateway = sub.add_parser("gateway", help="run the home gateway standalone")
    gateway.add_argument("--config", required=True)
    gateway.set_defaults(fn=cmd_gateway)

    sim = sub.add_parser("sim", help="run simulated devices against a gateway")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--speed", choices=("max", "realtime"), default="realtime")
    sim.add_argument("--gateway-host", default="127.0.0.1")
    sim.add_argument("--mqtt-port", type=int, default=1883)
    sim.add_argument("--coap-port", type=int, default=5683)
    sim.add_argument("--http-port", type=int, default=8421)
    sim.add_argument("--device-port", type=int, default=0, help="HTTP command listener port")
    sim.set_defaults(fn=cmd_sim)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HEMS_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunnerError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"startup failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
