"""Simulated home devices: five sensor/actuator kinds across five places.

Devices are dumb: sensors publish whatever value they hold (retained, so a
late dashboard sees the last known state), actuators apply whatever valid
command arrives on ``<topic>/set`` and republish their confirmed state on
``<topic>``.  All behavior is transport-agnostic; callers perform the
returned :class:`~aalhub.messages.Outbound` publishes on each device's own
connection.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

from .messages import HOME_PREFIX, Outbound
from .mqtt.client import ClientConfig, MqttClient
from .mqtt.topics import validate_topic

log = logging.getLogger("aalhub.devices")

TEMPERATURE_MIN_C = -40.0
TEMPERATURE_MAX_C = 85.0


class DeviceKind(str, Enum):
    RAIN = "rain"
    FLAME = "flame"
    TEMPERATURE = "temperature"
    PIR = "pir"
    RELAY = "relay"
    LED = "led"

    @property
    def is_sensor(self) -> bool:
        return self in (DeviceKind.RAIN, DeviceKind.FLAME,
                        DeviceKind.TEMPERATURE, DeviceKind.PIR)

    @property
    def is_actuator(self) -> bool:
        return not self.is_sensor


#: "gas" appears in deployments as a synonym for the flame detector.
KIND_ALIASES = {"gas": DeviceKind.FLAME}


class Location(str, Enum):
    BEDROOM = "bedroom"
    KITCHEN = "kitchen"
    TVROOM = "tvroom"
    MAIN_ENTRANCE = "main_entrance"
    TERRACE = "terrace"


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    kind: DeviceKind
    location: Location
    sample_period_s: float | None = None
    initial_state: bool | float = False

    @property
    def topic(self) -> str:
        return f"{HOME_PREFIX}/{self.location.value}/{self.device_id}"

    @property
    def command_topic(self) -> str:
        return f"{self.topic}/set"

    def __post_init__(self):
        validate_topic(self.topic)
        if self.kind == DeviceKind.TEMPERATURE:
            value = float(self.initial_state)
            if not TEMPERATURE_MIN_C <= value <= TEMPERATURE_MAX_C:
                raise TopologyError(
                    f"{self.device_id}: temperature {value} outside "
                    f"[{TEMPERATURE_MIN_C}, {TEMPERATURE_MAX_C}]")
        if self.sample_period_s is not None:
            if self.kind.is_actuator:
                raise TopologyError(f"{self.device_id}: actuators do not sample")
            if self.sample_period_s <= 0:
                raise TopologyError(f"{self.device_id}: sample period must be > 0")


@dataclass(frozen=True)
class StateChange:
    sim_time: float
    device_id: str
    old: bool | float
    new: bool | float
    noop: bool = False
    source: str = "command"


def encode_value(kind: DeviceKind, value: bool | float) -> str:
    """Booleans as "0"/"1", temperature as decimal text."""
    if kind == DeviceKind.TEMPERATURE:
        return str(float(value))
    return "1" if value else "0"


def parse_value(kind: DeviceKind, text: str) -> bool | float:
    """Inverse of :func:`encode_value`; raises ValueError on junk."""
    if kind == DeviceKind.TEMPERATURE:
        value = float(text)
        if not TEMPERATURE_MIN_C <= value <= TEMPERATURE_MAX_C:
            raise ValueError(f"temperature {value} out of range")
        return value
    if text == "0":
        return False
    if text == "1":
        return True
    raise ValueError(f"boolean payload must be '0' or '1', got {text!r}")


class Device:
    def __init__(self, spec: DeviceSpec):
        self.spec = spec
        self.value: bool | float = spec.initial_state
        if spec.kind == DeviceKind.TEMPERATURE:
            self.value = float(spec.initial_state)
        self._next_due = 0.0

    def state_publish(self) -> Outbound:
        return Outbound.text(self.spec.topic,
                             encode_value(self.spec.kind, self.value),
                             qos=1, retain=True)

    def due(self, now: float) -> bool:
        return (self.spec.sample_period_s is not None
                and now >= self._next_due)

    def mark_sampled(self, now: float) -> None:
        self._next_due = now + self.spec.sample_period_s


class DeviceFleet:
    """All devices of one home, plus the actuator state-change log."""

    def __init__(self, specs: list[DeviceSpec]):
        self.devices: dict[str, Device] = {}
        for spec in specs:
            if spec.device_id in self.devices:
                raise TopologyError(f"duplicate device_id: {spec.device_id}")
            self.devices[spec.device_id] = Device(spec)
        self.state_log: list[StateChange] = []

    def __len__(self) -> int:
        return len(self.devices)

    def specs(self) -> list[DeviceSpec]:
        return [d.spec for d in self.devices.values()]

    def actuators(self) -> list[Device]:
        return [d for d in self.devices.values() if d.spec.kind.is_actuator]

    def device_for_topic(self, topic: str) -> Device | None:
        for device in self.devices.values():
            if device.spec.topic == topic:
                return device
        return None

    def initial_publishes(self) -> list[tuple[str, Outbound]]:
        """Retained boot-time state for every device: (device_id, publish)."""
        return [(d.spec.device_id, d.state_publish())
                for d in self.devices.values()]

    def inject(self, device_id: str, value: bool | float, now: float,
               ) -> list[tuple[str, Outbound]]:
        """External stimulus: the device observes ``value`` and publishes it.

        Devices apply no debouncing; a repeated value publishes again."""
        device = self._get(device_id)
        if device.spec.kind == DeviceKind.TEMPERATURE:
            value = float(value)
            if not TEMPERATURE_MIN_C <= value <= TEMPERATURE_MAX_C:
                raise ValueError(f"temperature {value} out of range")
        else:
            value = bool(value)
        old = device.value
        device.value = value
        if device.spec.kind.is_actuator:
            self.state_log.append(StateChange(
                sim_time=now, device_id=device_id, old=old, new=value,
                noop=old == value, source="inject"))
        return [(device_id, device.state_publish())]

    def handle_command(self, device_id: str, payload: bytes, now: float,
                       ) -> list[tuple[str, Outbound]]:
        """Apply a ``<topic>/set`` command to an actuator.

        The confirmed state is republished (retained) even for no-op
        commands, so a commander always gets read-your-writes."""
        device = self._get(device_id)
        if not device.spec.kind.is_actuator:
            raise ValueError(f"{device_id} is not an actuator")
        try:
            value = parse_value(device.spec.kind, payload.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            log.warning("event=bad_command device=%s payload=%r error=%s",
                        device_id, payload, exc)
            return []
        old = device.value
        device.value = value
        self.state_log.append(StateChange(
            sim_time=now, device_id=device_id, old=old, new=value,
            noop=old == value))
        return [(device_id, device.state_publish())]

    def step(self, now: float) -> list[tuple[str, Outbound]]:
        """Publish every periodic sensor due at ``now`` (held value)."""
        out = []
        for device in self.devices.values():
            if device.due(now):
                device.mark_sampled(now)
                out.append((device.spec.device_id, device.state_publish()))
        return out

    def _get(self, device_id: str) -> Device:
        try:
            return self.devices[device_id]
        except KeyError:
            raise KeyError(f"unknown device: {device_id}") from None


# --------------------------------------------------------------------------- #
# topology config

def default_topology() -> list[DeviceSpec]:
    """The stock eight-device home."""
    return [
        DeviceSpec("rain", DeviceKind.RAIN, Location.TERRACE),
        DeviceSpec("flame", DeviceKind.FLAME, Location.KITCHEN),
        DeviceSpec("temperature", DeviceKind.TEMPERATURE, Location.TVROOM,
                   sample_period_s=30.0, initial_state=21.0),
        DeviceSpec("pir", DeviceKind.PIR, Location.KITCHEN),
        DeviceSpec("drawer_relay", DeviceKind.RELAY, Location.BEDROOM),
        DeviceSpec("oven_relay", DeviceKind.RELAY, Location.KITCHEN),
        DeviceSpec("heater_relay", DeviceKind.RELAY, Location.TVROOM),
        DeviceSpec("entrance_led", DeviceKind.LED, Location.MAIN_ENTRANCE),
    ]


def load_topology(path: str | Path) -> list[DeviceSpec]:
    """Parse a YAML topology file; see config/topology.yaml for the schema."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return parse_topology(raw)


def parse_topology(raw: dict) -> list[DeviceSpec]:
    if not isinstance(raw, dict) or "devices" not in raw:
        raise TopologyError("topology must be a mapping with a 'devices' list")
    entries = raw["devices"] or []
    specs = []
    seen = set()
    for entry in entries:
        try:
            kind_name = str(entry["kind"]).lower()
            kind = KIND_ALIASES.get(kind_name) or DeviceKind(kind_name)
            spec = DeviceSpec(
                device_id=str(entry["id"]),
                kind=kind,
                location=Location(str(entry["location"])),
                sample_period_s=entry.get("sample_period_s"),
                initial_state=entry.get("initial", False),
            )
        except (KeyError, ValueError) as exc:
            raise TopologyError(f"bad device entry {entry!r}: {exc}") from None
        if spec.device_id in seen:
            raise TopologyError(f"duplicate device_id: {spec.device_id}")
        seen.add(spec.device_id)
        specs.append(spec)
    return specs


def load_event_script(path: str | Path) -> list[tuple[int, str, str]]:
    """Event script: lines of ``<sim_time_ms> <device_id> <value>``."""
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"line {line_no}: expected 3 fields, got {line!r}")
            events.append((int(parts[0]), parts[1], parts[2]))
    events.sort(key=lambda e: e[0])
    return events


def script_value(fleet: DeviceFleet, device_id: str, text: str) -> bool | float:
    kind = fleet.devices[device_id].spec.kind
    return parse_value(kind, text)


def replay_script(specs: list[DeviceSpec],
                  events: list[tuple[int, str, str]]) -> list[str]:
    """Replay an event script under virtual time; returns the full publish
    trace (one line per broker-observed publish), byte-identical across runs."""
    from .sim import VirtualNetwork

    net = VirtualNetwork()
    fleet = DeviceFleet(specs)
    trace: list[str] = []

    observer = net.connect("observer")
    observer.on_message = lambda m: trace.append(
        f"t={round(net.clock.now * 1000)} {m.topic} {m.payload.decode('utf-8')}")
    observer.subscribe([(f"{HOME_PREFIX}/#", 1)])

    conns = {}
    for device in fleet.devices.values():
        device_id = device.spec.device_id
        conn = net.connect(f"dev-{device_id}")
        conns[device_id] = conn
        if device.spec.kind.is_actuator:
            conn.subscribe([(device.spec.command_topic, 1)])
            def handler(message, device_id=device_id):
                for dev_id, out in fleet.handle_command(
                        device_id, message.payload, net.clock.now):
                    conns[dev_id].publish(out.topic, out.payload,
                                          qos=out.qos, retain=out.retain)
            conn.on_message = handler
    for device_id, out in fleet.initial_publishes():
        conns[device_id].publish(out.topic, out.payload, qos=out.qos,
                                 retain=out.retain)

    for at_ms, device_id, value_text in events:
        net.clock.advance_to(at_ms / 1000)
        value = script_value(fleet, device_id, value_text)
        for dev_id, out in fleet.inject(device_id, value, net.clock.now):
            conns[dev_id].publish(out.topic, out.payload, qos=out.qos,
                                  retain=out.retain)
    return trace


# --------------------------------------------------------------------------- #
# wall-clock runner: one real MQTT connection per device

class FleetRunner:
    """Runs a fleet against a live broker; one client per device."""

    def __init__(self, fleet: DeviceFleet, host: str, port: int):
        self.fleet = fleet
        self.host = host
        self.port = port
        self.clients: dict[str, MqttClient] = {}
        self._tasks: list[asyncio.Task] = []

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._t0 = loop.time()
        for device in self.fleet.devices.values():
            client = MqttClient(ClientConfig(
                client_id=f"dev-{device.spec.device_id}",
                host=self.host, port=self.port, keepalive=30,
                reconnect_delay=1.0))
            await client.connect()
            self.clients[device.spec.device_id] = client
            if device.spec.kind.is_actuator:
                await client.subscribe([(device.spec.command_topic, 1)])
                self._tasks.append(asyncio.create_task(
                    self._actuator_loop(device.spec.device_id, client)))
        for device_id, outbound in self.fleet.initial_publishes():
            await self._publish(device_id, outbound)
        self._tasks.append(asyncio.create_task(self._sampler_loop()))

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        for client in self.clients.values():
            await client.disconnect()

    async def inject(self, device_id: str, value: bool | float) -> None:
        for dev_id, outbound in self.fleet.inject(device_id, value, self._now()):
            await self._publish(dev_id, outbound)

    def _now(self) -> float:
        return asyncio.get_running_loop().time() - self._t0

    async def _publish(self, device_id: str, outbound: Outbound) -> None:
        await self.clients[device_id].publish(
            outbound.topic, outbound.payload, qos=outbound.qos,
            retain=outbound.retain)

    async def _actuator_loop(self, device_id: str, client: MqttClient) -> None:
        while True:
            message = await client.messages.get()
            if message is None:
                return
            for dev_id, outbound in self.fleet.handle_command(
                    device_id, message.payload, self._now()):
                await self._publish(dev_id, outbound)

    async def _sampler_loop(self) -> None:
        while True:
            await asyncio.sleep(0.2)
            for device_id, outbound in self.fleet.step(self._now()):
                await self._publish(device_id, outbound)


async def run_fleet_script(runner: FleetRunner,
                           events: list[tuple[int, str, str]]) -> None:
    """Replay a ``<ms> <device> <value>`` script against a live runner."""
    started = asyncio.get_running_loop().time()
    for at_ms, device_id, text in events:
        delay = started + at_ms / 1000 - asyncio.get_running_loop().time()
        if delay > 0:
            await asyncio.sleep(delay)
        await runner.inject(device_id, script_value(runner.fleet, device_id, text))
