import pytest

from aalhub.devices import (
    DeviceFleet,
    DeviceKind,
    DeviceSpec,
    Location,
    TopologyError,
    default_topology,
    encode_value,
    load_event_script,
    load_topology,
    parse_topology,
    parse_value,
)
from aalhub.rules import default_rules_path
from aalhub.sim import VirtualNetwork


def test_default_topology_has_expected_eight_devices():
    specs = {s.device_id: s for s in default_topology()}
    assert len(specs) == 8
    assert specs["rain"].location == Location.TERRACE
    assert specs["flame"].location == Location.KITCHEN
    assert specs["temperature"].location == Location.TVROOM
    assert specs["pir"].location == Location.KITCHEN
    assert specs["drawer_relay"].location == Location.BEDROOM
    assert specs["oven_relay"].location == Location.KITCHEN
    assert specs["heater_relay"].location == Location.TVROOM
    assert specs["entrance_led"].location == Location.MAIN_ENTRANCE


def test_packaged_topology_matches_default():
    from aalhub.devices import Device
    packaged = load_topology(default_rules_path().parent / "topology.yaml")
    assert packaged == default_topology()


def test_topic_derivation():
    spec = DeviceSpec("flame", DeviceKind.FLAME, Location.KITCHEN)
    assert spec.topic == "home/kitchen/flame"
    assert spec.command_topic == "home/kitchen/flame/set"


def test_empty_topology_is_fine():
    assert parse_topology({"devices": []}) == []
    assert len(DeviceFleet([])) == 0


def test_duplicate_id_rejected():
    spec = DeviceSpec("x", DeviceKind.RAIN, Location.TERRACE)
    with pytest.raises(TopologyError):
        DeviceFleet([spec, spec])


def test_gas_is_alias_of_flame():
    specs = parse_topology(
        {"devices": [{"id": "gas1", "kind": "gas", "location": "kitchen"}]})
    assert specs[0].kind == DeviceKind.FLAME


def test_value_codecs():
    assert encode_value(DeviceKind.PIR, True) == "1"
    assert encode_value(DeviceKind.PIR, False) == "0"
    assert encode_value(DeviceKind.TEMPERATURE, 15.0) == "15.0"
    assert encode_value(DeviceKind.TEMPERATURE, 21.5) == "21.5"
    assert parse_value(DeviceKind.RELAY, "1") is True
    assert parse_value(DeviceKind.TEMPERATURE, "15.0") == 15.0
    with pytest.raises(ValueError):
        parse_value(DeviceKind.RELAY, "x")
    with pytest.raises(ValueError):
        parse_value(DeviceKind.TEMPERATURE, "900")


def test_temperature_range_enforced():
    with pytest.raises(TopologyError):
        DeviceSpec("t", DeviceKind.TEMPERATURE, Location.TVROOM,
                   initial_state=200.0)


def test_inject_publishes_retained():
    fleet = DeviceFleet(default_topology())
    ((device_id, outbound),) = fleet.inject("flame", True, 1.0)
    assert device_id == "flame"
    assert outbound.topic == "home/kitchen/flame"
    assert outbound.payload == b"1"
    assert outbound.retain is True

    ((_, outbound),) = fleet.inject("temperature", 15.0, 2.0)
    assert outbound.payload == b"15.0"


def test_devices_are_dumb_no_debounce():
    fleet = DeviceFleet(default_topology())
    first = fleet.inject("pir", True, 1.0)
    second = fleet.inject("pir", True, 1.1)
    assert first and second     # both publishes happen


def test_actuator_command_and_noop_log():
    fleet = DeviceFleet(default_topology())
    ((_, confirmed),) = fleet.handle_command("drawer_relay", b"1", 5.0)
    assert confirmed.topic == "home/bedroom/drawer_relay"
    assert confirmed.payload == b"1"
    assert confirmed.retain is True
    assert fleet.state_log[-1].noop is False

    fleet.handle_command("drawer_relay", b"1", 6.0)
    assert fleet.state_log[-1].noop is True


def test_malformed_command_ignored():
    fleet = DeviceFleet(default_topology())
    assert fleet.handle_command("drawer_relay", b"x", 1.0) == []
    assert fleet.state_log == []


def test_command_to_sensor_rejected():
    fleet = DeviceFleet(default_topology())
    with pytest.raises(ValueError):
        fleet.handle_command("flame", b"1", 1.0)


def test_step_publishes_periodic_sensors():
    fleet = DeviceFleet(default_topology())
    due = fleet.step(0.0)
    assert [device_id for device_id, _ in due] == ["temperature"]
    assert fleet.step(10.0) == []          # not due again yet
    again = fleet.step(30.0)
    assert [device_id for device_id, _ in again] == ["temperature"]


def test_topic_namespace_closed():
    fleet = DeviceFleet(default_topology())
    for _, outbound in fleet.initial_publishes():
        device = fleet.device_for_topic(outbound.topic)
        assert device is not None


def test_actuator_confirmed_state_equals_last_command():
    net = VirtualNetwork()
    fleet = DeviceFleet(default_topology())
    conns = {}
    for device in fleet.devices.values():
        conn = net.connect(f"dev-{device.spec.device_id}")
        conns[device.spec.device_id] = conn
        if device.spec.kind.is_actuator:
            conn.subscribe([(device.spec.command_topic, 1)])
            def handler(message, device_id=device.spec.device_id):
                for dev_id, out in fleet.handle_command(
                        device_id, message.payload, 0.0):
                    conns[dev_id].publish(out.topic, out.payload,
                                          qos=out.qos, retain=out.retain)
            conn.on_message = handler
    observer = net.connect("observer")
    observer.subscribe([("home/#", 1)])

    commander = net.connect("commander")
    commander.publish("home/bedroom/drawer_relay/set", "1", qos=1)
    confirmed = [m for m in observer.inbox
                 if m.topic == "home/bedroom/drawer_relay"]
    assert confirmed[-1].payload == b"1"
    assert fleet.devices["drawer_relay"].value is True


def test_event_script_parsing(tmp_path):
    script = tmp_path / "script.txt"
    script.write_text("# comment\n5000 flame 1\n1000 pir 1\n\n")
    events = load_event_script(script)
    assert events == [(1000, "pir", "1"), (5000, "flame", "1")]


def test_event_script_bad_line(tmp_path):
    script = tmp_path / "script.txt"
    script.write_text("1000 flame\n")
    with pytest.raises(ValueError):
        load_event_script(script)


def test_publish_trace_deterministic():
    def run():
        fleet = DeviceFleet(default_topology())
        trace = []
        for t_ms, device_id, value in [(0, "pir", True), (100, "flame", True),
                                       (200, "temperature", 17.5)]:
            for dev_id, out in fleet.inject(device_id, value, t_ms / 1000):
                trace.append((t_ms, dev_id, out.topic, out.payload))
        return trace
    assert run() == run()
