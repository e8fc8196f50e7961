"""Command line front end.

Subcommands map one-to-one onto the runtime pieces: ``broker``, ``devices``,
``rule-engine``, ``patient``, ``gateway``, plus the ``bench`` harness, the
``qr-size`` calculator, deterministic ``scenario`` replays and an all-in-one
``demo``.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys

from . import bench as bench_mod
from .devices import (
    DeviceFleet,
    FleetRunner,
    default_topology,
    load_event_script,
    load_topology,
    run_fleet_script,
    script_value,
)
from .gateway import run_gateway
from .mqtt.broker import BrokerConfig
from .mqtt.server import BrokerServer, run_broker
from .patient import PatientAgent, PatientAgentService, RenderCosts
from .qr_sizing import QrSizingInput, ScanConditions, format_report, min_qr_size
from .rules import RuleEngine, RuleEngineService, default_rules, load_rules
from .scenario import ScenarioEvent, ScenarioHarness, five_scenario_events
from .services import MqttServiceRunner, make_client

log = logging.getLogger("aalhub")


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _broker_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


# --------------------------------------------------------------------------- #
# subcommands


def cmd_broker(args: argparse.Namespace) -> int:
    config = BrokerConfig(max_packet_bytes=args.max_packet_bytes,
                          offline_queue_cap=args.offline_queue_cap)
    try:
        asyncio.run(run_broker(args.host, args.port, config, args.snapshot_path))
    except KeyboardInterrupt:
        pass
    return 0


def cmd_devices(args: argparse.Namespace) -> int:
    specs = load_topology(args.config) if args.config else default_topology()
    fleet = DeviceFleet(specs)
    events = load_event_script(args.script) if args.script else []

    if args.mode == "virtual":
        # deterministic in-process replay; prints the publish trace
        harness = ScenarioHarness(topology=specs)
        scenario_events = [
            ScenarioEvent(at_ms / 1000, "inject",
                          (device_id, script_value(fleet, device_id, value)))
            for at_ms, device_id, value in events]
        harness.run(scenario_events)
        for message in harness.net.connect("trace-probe").inbox:
            pass
        for line in harness.trace_lines:
            print(line)
        return 0

    host, port = _broker_address(args.broker)

    async def main() -> None:
        runner = FleetRunner(fleet, host, port)
        await runner.start()
        print(f"devices: {len(fleet)} connected to {host}:{port}", flush=True)
        try:
            if events:
                await run_fleet_script(runner, events)
            else:
                while True:
                    await asyncio.sleep(3600)
        finally:
            await runner.stop()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return 0


def cmd_rule_engine(args: argparse.Namespace) -> int:
    rules = load_rules(args.rules) if args.rules else default_rules()
    host, port = _broker_address(args.broker)
    service = RuleEngineService(RuleEngine(rules))

    async def main() -> None:
        runner = MqttServiceRunner(
            make_client("rule-engine", host, port, reconnect_delay=1.0,
                        clean_session=False),
            RuleEngineService.SUBSCRIPTIONS, service.handle_message,
            tick=service.tick)
        await runner.start()
        print(f"rule engine: {len(rules)} rules, broker {host}:{port}", flush=True)
        try:
            while True:
                await asyncio.sleep(3600)
        finally:
            await runner.stop()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return 0


def cmd_patient(args: argparse.Namespace) -> int:
    host, port = _broker_address(args.broker)
    agent = PatientAgent(RenderCosts.parse(args.render_costs))
    service = PatientAgentService(agent)

    def handler(topic: str, payload: bytes, now: float):
        before = len(agent.render_log)
        outs = service.handle_message(topic, payload, now)
        for entry in agent.render_log[before:]:
            print(entry.to_json(), flush=True)
        return outs

    async def main() -> None:
        runner = MqttServiceRunner(
            make_client(args.client_id, host, port,
                        clean_session=not args.persistent,
                        reconnect_delay=1.0),
            PatientAgentService.SUBSCRIPTIONS, handler)
        session_present = await runner.start()
        print(f"patient agent: broker {host}:{port} "
              f"session_present={session_present}", flush=True)
        try:
            while True:
                await asyncio.sleep(3600)
        finally:
            await runner.stop()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return 0


def cmd_gateway(args: argparse.Namespace) -> int:
    host, port = _broker_address(args.broker)
    run_gateway(args.host, args.port, host, port, args.token,
                log_level=args.log_level)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    costs = (RenderCosts.zero() if args.transport_only
             else RenderCosts.parse(args.render_costs))
    broker = _broker_address(args.broker) if args.broker else None
    samples, report = asyncio.run(bench_mod.run_bench(
        args.kind, args.n, costs, csv_path=args.csv, broker=broker,
        timeout_s=args.timeout))
    sys.stdout.write(bench_mod.format_report(report))
    return 1 if report.loss_count else 0


def cmd_qr_size(args: argparse.Namespace) -> int:
    inputs = QrSizingInput(
        d_scan_mm=args.d_scan_mm,
        conditions=ScanConditions(
            poor_lighting=args.poor_lighting,
            mid_light_colored_code=args.mid_light_colored_code,
            not_front_on=args.not_front_on),
        modules_per_side=args.modules_per_side,
        pixels_per_module=args.pixels_per_module,
        fov_mm=args.fov_mm,
        resolution_pixels=args.resolution_pixels,
        aspect_phi=args.aspect_phi,
    )
    result = min_qr_size(inputs)
    if args.json:
        from dataclasses import asdict
        print(json.dumps(asdict(result), indent=2))
    else:
        sys.stdout.write(format_report(inputs, result))
    return 0


def cmd_scenario(args: argparse.Namespace) -> int:
    topology = load_topology(args.config) if args.config else None
    rules = load_rules(args.rules) if args.rules else None
    harness = ScenarioHarness(topology=topology, rules=rules)
    trace = harness.run(five_scenario_events(args.confirm_delay))
    sys.stdout.write(trace)
    return 0


def cmd_demo(args: argparse.Namespace) -> int:
    """Whole stack in one process: broker, devices, rules, agent, gateway."""
    import uvicorn

    from .gateway import create_app

    async def main() -> None:
        server = BrokerServer(host="127.0.0.1", port=args.broker_port)
        await server.start()
        fleet_runner = FleetRunner(DeviceFleet(default_topology()),
                                   "127.0.0.1", server.port)
        await fleet_runner.start()

        engine_service = RuleEngineService(RuleEngine(default_rules()))
        engine_runner = MqttServiceRunner(
            make_client("rule-engine", "127.0.0.1", server.port,
                        reconnect_delay=1.0),
            RuleEngineService.SUBSCRIPTIONS, engine_service.handle_message,
            tick=engine_service.tick)
        await engine_runner.start()

        agent = PatientAgent()
        agent_service = PatientAgentService(agent)

        def agent_handler(topic, payload, now):
            before = len(agent.render_log)
            agent_service.handle_message(topic, payload, now)
            for entry in agent.render_log[before:]:
                print(f"[patient] {entry.to_json()}", flush=True)
            return []

        agent_runner = MqttServiceRunner(
            make_client("patient", "127.0.0.1", server.port,
                        clean_session=False, reconnect_delay=1.0),
            PatientAgentService.SUBSCRIPTIONS, agent_handler)
        await agent_runner.start()

        app = create_app("127.0.0.1", server.port, token=args.token)
        uv_config = uvicorn.Config(app, host="127.0.0.1", port=args.port,
                                   log_level="warning")
        uv_server = uvicorn.Server(uv_config)
        print(f"demo: broker :{server.port}  gateway http://127.0.0.1:{args.port}"
              f"  (Ctrl+C to stop)", flush=True)
        try:
            await uv_server.serve()
        finally:
            await agent_runner.stop()
            await engine_runner.stop()
            await fleet_runner.stop()
            await server.stop()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return 0


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aalhub",
        description="Desk-scale assisted-living stack over MQTT 3.1.1")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="run the MQTT broker")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=1883)
    p.add_argument("--max-packet-bytes", type=int, default=262_144)
    p.add_argument("--offline-queue-cap", type=int, default=1024)
    p.add_argument("--snapshot-path", default=None,
                   help="persist sessions/retained state here on shutdown")
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("devices", help="run the simulated device fleet")
    p.add_argument("--config", default=None, help="topology YAML")
    p.add_argument("--broker", default="127.0.0.1:1883")
    p.add_argument("--mode", choices=["virtual", "wall"], default="wall")
    p.add_argument("--script", default=None,
                   help="event file: lines of '<sim_time_ms> <device_id> <value>'")
    p.set_defaults(func=cmd_devices)

    p = sub.add_parser("rule-engine", help="run the scenario rule engine")
    p.add_argument("--broker", default="127.0.0.1:1883")
    p.add_argument("--rules", default=None, help="rules YAML")
    p.set_defaults(func=cmd_rule_engine)

    p = sub.add_parser("patient", help="run the patient-side agent")
    p.add_argument("--broker", default="127.0.0.1:1883")
    p.add_argument("--client-id", default="patient")
    p.add_argument("--persistent", action="store_true",
                   help="keep a broker-side session while offline")
    p.add_argument("--render-costs", default="364,106",
                   help="t_audio,t_image in milliseconds")
    p.set_defaults(func=cmd_patient)

    p = sub.add_parser("gateway", help="run the dashboard gateway")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--broker", default="127.0.0.1:1883")
    p.add_argument("--token", default=None)
    p.set_defaults(func=cmd_gateway)

    p = sub.add_parser("bench", help="response-time trials")
    p.add_argument("--kind", choices=["audio", "image"], required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--csv", default=None)
    p.add_argument("--broker", default=None,
                   help="use an external broker instead of an in-process one")
    p.add_argument("--render-costs", default="364,106")
    p.add_argument("--transport-only", action="store_true",
                   help="zero render costs: measure the MQTT loop alone")
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("qr-size", help="minimum printed tag size")
    p.add_argument("--d-scan-mm", type=float, default=300.0)
    p.add_argument("--poor-lighting", action="store_true")
    p.add_argument("--mid-light-colored-code", action="store_true")
    p.add_argument("--not-front-on", action="store_true")
    p.add_argument("--modules-per-side", type=int, default=21)
    p.add_argument("--pixels-per-module", type=int, default=10)
    p.add_argument("--fov-mm", type=float, default=340.0)
    p.add_argument("--resolution-pixels", type=float, default=12_000_000)
    p.add_argument("--aspect-phi", type=float,
                   default=QrSizingInput().aspect_phi)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_qr_size)

    p = sub.add_parser("scenario", help="deterministic five-scenario replay")
    p.add_argument("--config", default=None, help="topology YAML")
    p.add_argument("--rules", default=None, help="rules YAML")
    p.add_argument("--confirm-delay", type=float, default=10.0,
                   help="seconds between the cold prompt and the confirmation")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("demo", help="run the whole stack in one process")
    p.add_argument("--port", type=int, default=8080, help="gateway port")
    p.add_argument("--broker-port", type=int, default=1883)
    p.add_argument("--token", default=None)
    p.set_defaults(func=cmd_demo)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
