"""Full-stack deterministic scenario runs.

Wires the device fleet, rule engine, patient agent and a caregiver client to
one in-memory broker under a virtual clock, replays a timed event script, and
records the engine's emission trace.  Identical script in, byte-identical
trace out.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from typing import Callable

from .devices import DeviceFleet, default_topology
from .messages import InboundMessage, Outbound
from .patient import PatientAgent, PatientAgentService, RenderCosts
from .rules import (
    ActuateEmit,
    EmittedAction,
    NotifyEmit,
    Rule,
    RuleEngine,
    RuleEngineService,
    default_rules,
)
from .sim import VirtualClock, VirtualConnection, VirtualNetwork

log = logging.getLogger("aalhub.scenario")


@dataclass(frozen=True)
class ScenarioEvent:
    at_s: float
    kind: str          # inject | scan | confirm_prompt | publish | step
    args: tuple = ()


def format_emission(now: float, emission: EmittedAction) -> str:
    t_ms = round(now * 1000)
    if isinstance(emission, ActuateEmit):
        return f"t={t_ms} actuate {emission.topic} {emission.value}"
    notification = emission.notification
    line = (f"t={t_ms} notify {notification.notif_id} "
            f"{notification.modality.value} {notification.asset_ref}")
    if notification.text:
        line += f' "{notification.text}"'
    return line


class ScenarioHarness:
    def __init__(self, topology=None, rules: list[Rule] | None = None,
                 costs: RenderCosts | None = None):
        self.clock = VirtualClock()
        self.net = VirtualNetwork(clock=self.clock)
        self.fleet = DeviceFleet(topology or default_topology())
        self.engine = RuleEngine(rules if rules is not None else default_rules())
        self.agent = PatientAgent(costs or RenderCosts())
        self.trace_lines: list[str] = []
        self._schedule: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0
        self._wire()

    # ------------------------------------------------------------------ #

    def _wire(self) -> None:
        self.device_conns: dict[str, VirtualConnection] = {}
        for device in self.fleet.devices.values():
            device_id = device.spec.device_id
            conn = self.net.connect(f"dev-{device_id}")
            self.device_conns[device_id] = conn
            if device.spec.kind.is_actuator:
                conn.subscribe([(device.spec.command_topic, 1)])
                conn.on_message = self._device_handler(device_id)
        for device_id, outbound in self.fleet.initial_publishes():
            self._publish_as(self.device_conns[device_id], outbound)

        self.engine_service = RuleEngineService(self.engine, trace=self._trace)
        self.engine_conn = self.net.connect("rule-engine")
        self.engine_conn.on_message = self._engine_handler
        self.engine_conn.subscribe(RuleEngineService.SUBSCRIPTIONS)

        self.agent_service = PatientAgentService(self.agent)
        self.agent_conn = self.net.connect("patient", clean_session=False)
        self.agent_conn.on_message = self._agent_handler
        self.agent_conn.subscribe(PatientAgentService.SUBSCRIPTIONS)

        self.caregiver = self.net.connect("caregiver")

    def _device_handler(self, device_id: str):
        def handle(message: InboundMessage) -> None:
            for dev_id, outbound in self.fleet.handle_command(
                    device_id, message.payload, self.clock.now):
                self._publish_as(self.device_conns[dev_id], outbound)
        return handle

    def _engine_handler(self, message: InboundMessage) -> None:
        for outbound in self.engine_service.handle_message(
                message.topic, message.payload, self.clock.now):
            self._publish_as(self.engine_conn, outbound)

    def _agent_handler(self, message: InboundMessage) -> None:
        self.agent_service.handle_message(
            message.topic, message.payload, self.clock.now)

    def _publish_as(self, conn: VirtualConnection, outbound: Outbound) -> None:
        conn.publish(outbound.topic, outbound.payload,
                     qos=outbound.qos, retain=outbound.retain)

    def _trace(self, now: float, emission: EmittedAction) -> None:
        self.trace_lines.append(format_emission(now, emission))

    # ------------------------------------------------------------------ #

    def _push(self, at_s: float, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._schedule, (at_s, self._seq, fn))

    def run(self, events: list[ScenarioEvent]) -> str:
        """Replay ``events``; returns the emission trace, one line per action."""
        for event in events:
            self._push(event.at_s, self._action(event))
        while self._schedule:
            at_s, _, fn = heapq.heappop(self._schedule)
            self.clock.advance_to(at_s)
            self.engine_service.tick(self.clock.now)
            fn()
            self.net.tick()
        return "".join(line + "\n" for line in self.trace_lines)

    def _action(self, event: ScenarioEvent) -> Callable[[], None]:
        if event.kind == "inject":
            device_id, value = event.args
            def inject() -> None:
                for dev_id, outbound in self.fleet.inject(
                        device_id, value, self.clock.now):
                    self._publish_as(self.device_conns[dev_id], outbound)
            return inject
        if event.kind == "scan":
            tag_id, latency = event.args
            def scan() -> None:
                outcome = self.agent.scan_qr(tag_id, latency, self.clock.now)
                if outcome.outbound is not None:
                    outbound = outcome.outbound
                    self._push(outcome.finished_at,
                               lambda: self._publish_as(self.agent_conn, outbound))
            return scan
        if event.kind == "confirm_prompt":
            def confirm() -> None:
                for entry in self.agent.history():
                    if entry.rule_id is not None:
                        outbound = self.agent.confirm(entry.notif_id, self.clock.now)
                        self._publish_as(self.agent_conn, outbound)
                        return
                raise RuntimeError("no confirmable notification in the render log")
            return confirm
        if event.kind == "publish":
            topic, payload = event.args
            return lambda: self._publish_as(
                self.caregiver, Outbound.text(topic, payload, qos=1))
        if event.kind == "step":
            def step() -> None:
                for device_id, outbound in self.fleet.step(self.clock.now):
                    self._publish_as(self.device_conns[device_id], outbound)
            return step
        raise ValueError(f"unknown scenario event kind {event.kind!r}")


def five_scenario_events(confirm_delay_s: float = 10.0) -> list[ScenarioEvent]:
    """Timed script exercising the five stock scenarios.

    ``confirm_delay_s`` is measured from the cold-temperature trigger; values
    past the 60 s window exercise the expiry path."""
    return [
        # caregiver unlocks the drawer; confirmed state fires the reminder
        ScenarioEvent(1.0, "publish", ("home/bedroom/drawer_relay/set", "1")),
        # bedroom-door tag recognized after 0.4 s of staring
        ScenarioEvent(2.0, "scan", ("bedroom_door", 0.4)),
        # kitchen presence, with a debounced repeat inside 5 s and a fresh
        # firing afterwards
        ScenarioEvent(3.0, "inject", ("pir", True)),
        ScenarioEvent(3.5, "inject", ("pir", True)),
        ScenarioEvent(9.0, "inject", ("pir", True)),
        # cold reading prompts; confirmation may arrive inside or past the window
        ScenarioEvent(10.0, "inject", ("temperature", 15.0)),
        ScenarioEvent(10.0 + confirm_delay_s, "confirm_prompt"),
        # flame: cut the oven and alert
        ScenarioEvent(25.0, "inject", ("flame", True)),
    ]
