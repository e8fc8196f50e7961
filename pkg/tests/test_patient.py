import json

import pytest

from aalhub.patient import (
    PatientAgent,
    PatientAgentService,
    RenderCosts,
    ScanInProgressError,
)
from aalhub.rules import (
    Modality,
    Notification,
    RuleEngine,
    RuleEngineService,
    default_rules,
)
from aalhub.sim import VirtualNetwork


def notif_payload(notif_id, modality="audio", asset="beep", text=None,
                  rule_id=None, created_at=0.0):
    return Notification(notif_id=notif_id, modality=Modality(modality),
                        asset_ref=asset, text=text, created_at=created_at,
                        rule_id=rule_id).to_payload()


# --- scanning -----------------------------------------------------------------


def test_scan_within_cutoff_detected():
    agent = PatientAgent()
    outcome = agent.scan_qr("bedroom_door", 0.4, now=10.0)
    assert outcome.detected
    assert outcome.finished_at == 10.4
    assert outcome.outbound.topic == "patient/qr/bedroom_door"
    assert outcome.outbound.payload == b"detected"


def test_scan_boundary_cases():
    agent = PatientAgent()
    assert agent.scan_qr("a", 2.9, now=0.0).detected
    agent2 = PatientAgent()
    assert agent2.scan_qr("a", 3.0, now=0.0).detected       # boundary inclusive
    agent3 = PatientAgent()
    outcome = agent3.scan_qr("a", 3.1, now=0.0)
    assert not outcome.detected
    assert outcome.outbound is None
    assert outcome.finished_at == 3.0                        # gave up at cutoff


def test_concurrent_scan_rejected():
    agent = PatientAgent()
    agent.scan_qr("a", 2.0, now=0.0)
    with pytest.raises(ScanInProgressError):
        agent.scan_qr("b", 0.1, now=1.0)
    # free again after the first scan finishes
    agent.scan_qr("b", 0.1, now=2.0)


def test_negative_latency_rejected():
    with pytest.raises(ValueError):
        PatientAgent().scan_qr("a", -0.1, now=0.0)


# --- notifications --------------------------------------------------------------


def test_render_costs_by_modality():
    agent = PatientAgent(RenderCosts(audio_ms=364.0, image_ms=106.0))
    audio = agent.on_notification(notif_payload(1, "audio"), now=1.0)
    assert audio.render_complete_time == pytest.approx(1.364)
    image = agent.on_notification(notif_payload(2, "image3d"), now=2.0)
    assert image.render_complete_time == pytest.approx(2.106)
    text = agent.on_notification(notif_payload(3, "text", text="hello"), now=3.0)
    assert text.render_complete_time == pytest.approx(3.0)


def test_notifications_render_one_at_a_time():
    agent = PatientAgent(RenderCosts(audio_ms=1000.0, image_ms=1000.0))
    first = agent.on_notification(notif_payload(1, "image3d"), now=0.0)
    second = agent.on_notification(notif_payload(2, "audio"), now=0.0)
    assert first.render_complete_time == pytest.approx(1.0)
    assert second.render_complete_time == pytest.approx(2.0)   # waited for 1


def test_batch_renders_in_notif_id_order():
    agent = PatientAgent(RenderCosts(audio_ms=10.0, image_ms=10.0))
    entries = agent.on_notifications(
        [notif_payload(5, "audio"), notif_payload(4, "image3d")], now=0.0)
    assert [e.notif_id for e in entries] == [4, 5]


def test_malformed_payload_dropped():
    agent = PatientAgent()
    assert agent.on_notification(b"not json", now=0.0) is None
    assert agent.on_notification(b'{"incomplete": 1}', now=0.0) is None
    assert agent.render_log == []


def test_duplicate_redelivery_logged_once():
    agent = PatientAgent()
    payload = notif_payload(7)
    assert agent.on_notification(payload, now=0.0) is not None
    assert agent.on_notification(payload, now=1.0) is None
    assert len(agent.render_log) == 1


def test_history_newest_first_and_filterable():
    agent = PatientAgent()
    agent.on_notification(notif_payload(1, "audio"), now=0.0)
    agent.on_notification(notif_payload(2, "image3d"), now=1.0)
    agent.on_notification(notif_payload(3, "audio"), now=2.0)
    assert [e.notif_id for e in agent.history()] == [3, 2, 1]
    assert [e.notif_id for e in agent.history(Modality.AUDIO)] == [3, 1]


def test_confirm_publishes_rule_id():
    agent = PatientAgent()
    agent.on_notification(
        notif_payload(9, "text", text="cold?", rule_id="cold_indoor"), now=0.0)
    outbound = agent.confirm(9, now=1.0)
    assert outbound.topic == "patient/confirm"
    assert json.loads(outbound.payload) == {"rule_id": "cold_indoor"}


def test_confirm_rejects_unknown_and_unconfirmable():
    agent = PatientAgent()
    agent.on_notification(notif_payload(1), now=0.0)
    with pytest.raises(ValueError):
        agent.confirm(1, now=0.0)
    with pytest.raises(KeyError):
        agent.confirm(99, now=0.0)


def test_render_log_entry_json_round_trips():
    agent = PatientAgent()
    entry = agent.on_notification(notif_payload(1, "image3d", asset="pills"), 0.5)
    record = json.loads(entry.to_json())
    assert record["notif_id"] == 1
    assert record["asset_ref"] == "pills"


# --- end-to-end store-and-forward over the virtual broker -----------------------


def wire_engine(net, engine_service):
    conn = net.connect("rule-engine")
    def handle(message):
        for out in engine_service.handle_message(message.topic, message.payload,
                                                 net.clock.now):
            conn.publish(out.topic, out.payload, qos=out.qos, retain=out.retain)
    conn.on_message = handle
    conn.subscribe(RuleEngineService.SUBSCRIPTIONS)
    return conn


def wire_agent(net, agent):
    service = PatientAgentService(agent)
    conn = net.connect("patient", clean_session=False)
    conn.on_message = lambda m: service.handle_message(
        m.topic, m.payload, net.clock.now)
    conn.subscribe(PatientAgentService.SUBSCRIPTIONS)
    return conn


def test_agent_receives_all_notifications_exactly_once():
    net = VirtualNetwork()
    engine_service = RuleEngineService(RuleEngine(default_rules()))
    wire_engine(net, engine_service)
    agent = PatientAgent()
    wire_agent(net, agent)

    sensor = net.connect("sensor")
    net.clock.advance(1.0)
    sensor.publish("home/terrace/rain", "1", qos=1, retain=True)
    assert [e.asset_ref for e in agent.render_log] == [
        "umbrella", "umbrella_reminder"]


def test_offline_agent_catches_up_in_order():
    net = VirtualNetwork()
    engine_service = RuleEngineService(RuleEngine(default_rules()))
    wire_engine(net, engine_service)
    agent = PatientAgent()
    agent_conn = wire_agent(net, agent)

    agent_conn.disconnect()
    sensor = net.connect("sensor")
    for t in (10.0, 20.0, 30.0):
        net.clock.advance_to(t)
        sensor.publish("home/terrace/rain", "1", qos=1)

    net.clock.advance_to(40.0)
    # handler installed before CONNECT so held-back deliveries hit it too
    agent_conn2 = net.connect(
        "patient", clean_session=False,
        on_message=lambda m: agent.on_notification(m.payload, net.clock.now))
    assert agent_conn2.session_present is True

    assert [e.notif_id for e in agent.render_log] == [1, 2, 3, 4, 5, 6]
    assert [e.asset_ref for e in agent.render_log] == [
        "umbrella", "umbrella_reminder"] * 3
