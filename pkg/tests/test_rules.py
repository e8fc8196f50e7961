import json

import pytest

from aalhub.rules import (
    Actuate,
    ActuateEmit,
    Confirmation,
    Modality,
    NotifyEmit,
    NotifySpec,
    Predicate,
    Rule,
    RuleConfigError,
    RuleEngine,
    RuleEngineService,
    default_rules,
    parse_rules,
)


def engine_with_defaults() -> RuleEngine:
    return RuleEngine(default_rules())


def kinds(emitted):
    return [type(e).__name__ for e in emitted]


def notify_assets(emitted):
    return [(e.notification.modality.value, e.notification.asset_ref)
            for e in emitted if isinstance(e, NotifyEmit)]


# --- default config ----------------------------------------------------------


def test_default_config_loads_six_rules():
    rules = default_rules()
    ids = [r.rule_id for r in rules]
    assert ids == ["medication_reminder", "bedroom_door_tag", "kitchen_dishes",
                   "cold_indoor", "flame_alarm", "rain_umbrella"]


def test_flame_scenario_actions():
    rule = {r.rule_id: r for r in default_rules()}["flame_alarm"]
    assert rule.trigger_filter == "home/kitchen/flame"
    assert rule.predicate == Predicate(op="equals", value="1")
    assert rule.actions == (
        Actuate(topic="home/kitchen/oven_relay/set", value="0"),
        NotifySpec(modality=Modality.IMAGE3D, asset_ref="flame_alert"),
    )


def test_cold_scenario_config():
    rule = {r.rule_id: r for r in default_rules()}["cold_indoor"]
    assert rule.predicate == Predicate(op="less_than", value=18.0)
    assert rule.confirmation.timeout_s == 60.0
    assert rule.confirmation.on_confirm == (
        Actuate(topic="home/tvroom/heater_relay/set", value="1"),)
    assert rule.confirmation.prompt.modality == Modality.TEXT


# --- firing ------------------------------------------------------------------


def test_rain_event_emits_umbrella_pair():
    engine = engine_with_defaults()
    emitted = engine.on_event("home/terrace/rain", b"1", 1.0)
    assert notify_assets(emitted) == [
        ("image3d", "umbrella"), ("audio", "umbrella_reminder")]


def test_pir_event_emits_dishes_pair():
    engine = engine_with_defaults()
    emitted = engine.on_event("home/kitchen/pir", b"1", 1.0)
    assert notify_assets(emitted) == [
        ("image3d", "dishes"), ("audio", "dishes_place")]


def test_qr_event_emits_family_pair():
    engine = engine_with_defaults()
    emitted = engine.on_event("patient/qr/bedroom_door", b"detected", 1.0)
    assert notify_assets(emitted) == [
        ("image3d", "family_photo"), ("audio", "family_info")]


def test_drawer_state_emits_pills_pair():
    engine = engine_with_defaults()
    emitted = engine.on_event("home/bedroom/drawer_relay", b"1", 1.0)
    assert notify_assets(emitted) == [
        ("image3d", "pills"), ("audio", "medication_time")]


def test_flame_event_actuates_then_alerts():
    engine = engine_with_defaults()
    emitted = engine.on_event("home/kitchen/flame", b"1", 1.0)
    assert kinds(emitted) == ["ActuateEmit", "NotifyEmit"]
    assert emitted[0] == ActuateEmit(topic="home/kitchen/oven_relay/set", value="0")


def test_zero_payloads_do_not_fire():
    engine = engine_with_defaults()
    assert engine.on_event("home/kitchen/flame", b"0", 1.0) == []
    assert engine.on_event("home/kitchen/pir", b"0", 1.0) == []


def test_notif_ids_strictly_increase():
    engine = engine_with_defaults()
    ids = []
    for t in range(10, 100, 10):
        for emitted in (engine.on_event("home/terrace/rain", b"1", float(t)),):
            ids.extend(e.notification.notif_id for e in emitted
                       if isinstance(e, NotifyEmit))
    assert ids == sorted(ids)
    assert len(set(ids)) == len(ids)


def test_payload_decode_failure_skips_rule():
    engine = engine_with_defaults()
    assert engine.on_event("home/tvroom/temperature", b"warm", 1.0) == []


def test_empty_rule_file_idles():
    engine = RuleEngine([])
    assert engine.on_event("home/kitchen/flame", b"1", 1.0) == []


# --- debounce ----------------------------------------------------------------


def test_pir_debounce_five_seconds():
    engine = engine_with_defaults()
    assert engine.on_event("home/kitchen/pir", b"1", 1.0) != []
    assert engine.on_event("home/kitchen/pir", b"1", 4.0) == []     # < 5 s
    assert engine.on_event("home/kitchen/pir", b"1", 5.9) == []     # still < 5 s after 1.0
    assert engine.on_event("home/kitchen/pir", b"1", 6.0) != []     # exactly 5 s later


def test_debounce_spacing_property():
    engine = engine_with_defaults()
    fire_times = []
    t = 0.0
    for _ in range(200):
        t += 0.7
        if engine.on_event("home/kitchen/pir", b"1", t):
            fire_times.append(t)
    gaps = [b - a for a, b in zip(fire_times, fire_times[1:])]
    assert all(gap >= 5.0 for gap in gaps)


# --- confirmation ------------------------------------------------------------


def test_cold_prompt_then_confirm_in_window():
    engine = engine_with_defaults()
    emitted = engine.on_event("home/tvroom/temperature", b"15.0", 10.0)
    (prompt,) = emitted
    assert isinstance(prompt, NotifyEmit)
    assert prompt.notification.modality == Modality.TEXT
    assert prompt.notification.rule_id == "cold_indoor"
    assert "cold_indoor" in engine.pending

    actions = engine.on_confirm("cold_indoor", 40.0)
    assert actions == [ActuateEmit(topic="home/tvroom/heater_relay/set", value="1")]
    assert engine.pending == {}


def test_confirm_exactly_at_deadline_accepted():
    engine = engine_with_defaults()
    engine.on_event("home/tvroom/temperature", b"15.0", 10.0)
    assert engine.on_confirm("cold_indoor", 70.0) != []


def test_confirm_after_deadline_rejected():
    engine = engine_with_defaults()
    engine.on_event("home/tvroom/temperature", b"15.0", 10.0)
    assert engine.on_confirm("cold_indoor", 71.0) == []


def test_confirm_without_pending_is_noop():
    engine = engine_with_defaults()
    assert engine.on_confirm("cold_indoor", 1.0) == []
    assert engine.on_confirm("nonexistent", 1.0) == []


def test_retrigger_refreshes_deadline():
    engine = engine_with_defaults()
    engine.on_event("home/tvroom/temperature", b"15.0", 10.0)
    engine.on_event("home/tvroom/temperature", b"14.0", 50.0)
    assert len(engine.pending) == 1
    assert engine.pending["cold_indoor"].deadline == 110.0
    # still confirmable past the first deadline
    assert engine.on_confirm("cold_indoor", 90.0) != []


def test_expire_pending():
    engine = engine_with_defaults()
    engine.on_event("home/tvroom/temperature", b"15.0", 10.0)
    assert engine.expire_pending(70.0) == []      # boundary: not yet expired
    assert engine.expire_pending(70.1) == ["cold_indoor"]
    assert engine.on_confirm("cold_indoor", 70.2) == []


def test_gated_action_never_emitted_without_confirm():
    engine = engine_with_defaults()
    emitted = engine.on_event("home/tvroom/temperature", b"15.0", 10.0)
    actuates = [e for e in emitted if isinstance(e, ActuateEmit)]
    assert actuates == []


# --- config parsing ----------------------------------------------------------


def test_duplicate_rule_id_rejected():
    rule = Rule(rule_id="r", trigger_filter="a", predicate=Predicate(op="any"))
    with pytest.raises(RuleConfigError):
        RuleEngine([rule, rule])


def test_parse_rejects_multiple_predicates():
    with pytest.raises(RuleConfigError):
        parse_rules({"rules": [{
            "id": "r",
            "trigger": {"topic": "a", "equals": "1", "less_than": 2},
        }]})


def test_parse_rejects_text_notify_without_text():
    with pytest.raises(RuleConfigError):
        parse_rules({"rules": [{
            "id": "r", "trigger": {"topic": "a"},
            "actions": [{"notify": {"modality": "text", "asset": "x"}}],
        }]})


def test_parse_rejects_bad_filter():
    with pytest.raises(Exception):
        parse_rules({"rules": [{"id": "r", "trigger": {"topic": "a/#/b"}}]})


def test_any_predicate():
    rules = parse_rules({"rules": [{
        "id": "r", "trigger": {"topic": "t"},
        "actions": [{"notify": {"modality": "audio", "asset": "beep"}}],
    }]})
    engine = RuleEngine(rules)
    assert engine.on_event("t", b"whatever", 0.0) != []


def test_greater_than_predicate():
    rules = parse_rules({"rules": [{
        "id": "hot", "trigger": {"topic": "t", "greater_than": 30},
        "actions": [{"notify": {"modality": "audio", "asset": "fan"}}],
    }]})
    engine = RuleEngine(rules)
    assert engine.on_event("t", b"31.5", 0.0) != []
    assert engine.on_event("t", b"29.0", 0.0) == []


# --- service routing ----------------------------------------------------------


def test_service_routes_confirm_topic():
    engine = engine_with_defaults()
    service = RuleEngineService(engine)
    service.handle_message("home/tvroom/temperature", b"15.0", 10.0)
    out = service.handle_message(
        "patient/confirm", json.dumps({"rule_id": "cold_indoor"}).encode(), 20.0)
    assert [o.topic for o in out] == ["home/tvroom/heater_relay/set"]
    assert out[0].payload == b"1"


def test_service_notification_payload_schema():
    engine = engine_with_defaults()
    service = RuleEngineService(engine)
    out = service.handle_message("home/terrace/rain", b"1", 3.25)
    assert [o.topic for o in out] == ["patient/notify/1", "patient/notify/2"]
    record = json.loads(out[0].payload)
    assert record == {
        "asset_ref": "umbrella",
        "created_at": 3.25,
        "modality": "image3d",
        "notif_id": 1,
        "text": None,
    }


def test_service_ignores_malformed_confirm():
    service = RuleEngineService(engine_with_defaults())
    assert service.handle_message("patient/confirm", b"junk", 1.0) == []


def test_determinism_identical_traces():
    def run():
        service = RuleEngineService(engine_with_defaults())
        out = []
        for t, topic, payload in [
                (1.0, "home/terrace/rain", b"1"),
                (2.0, "home/kitchen/pir", b"1"),
                (3.0, "home/tvroom/temperature", b"15.0"),
                (20.0, "patient/confirm", b'{"rule_id": "cold_indoor"}')]:
            for o in service.handle_message(topic, payload, t):
                out.append((t, o.topic, o.payload))
        return out
    assert run() == run()
