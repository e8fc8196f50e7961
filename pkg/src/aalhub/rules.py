"""Data-driven scenario rules: sensor/QR/confirmation triggers in, actuator
commands and patient notifications out.

The engine is deliberately a plain event-in/actions-out core.  Bound to a
connection (virtual or TCP) it behaves as an ordinary MQTT client: it
subscribes to ``home/#``, ``patient/qr/#`` and ``patient/confirm``, publishes
actuator commands on ``<topic>/set`` and notifications on
``patient/notify/<notif_id>``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

from .messages import CONFIRM_TOPIC, NOTIFY_TOPIC_PREFIX, Outbound
from .mqtt.topics import topic_matches, validate_filter

log = logging.getLogger("aalhub.rules")

DEFAULT_CONFIRM_TIMEOUT_S = 60.0


class Modality(str, Enum):
    AUDIO = "audio"
    TEXT = "text"
    IMAGE3D = "image3d"


class RuleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Notification:
    """One message for the patient's glasses, in any of the three modalities."""

    notif_id: int
    modality: Modality
    asset_ref: str
    created_at: float
    text: str | None = None
    #: set on confirmation prompts so the agent can answer with the rule id
    rule_id: str | None = None

    def to_payload(self) -> bytes:
        record = {
            "notif_id": self.notif_id,
            "modality": self.modality.value,
            "asset_ref": self.asset_ref,
            "text": self.text,
            "created_at": self.created_at,
        }
        if self.rule_id is not None:
            record["rule_id"] = self.rule_id
        return json.dumps(record, sort_keys=True).encode("utf-8")

    @classmethod
    def from_payload(cls, payload: bytes) -> "Notification":
        record = json.loads(payload.decode("utf-8"))
        return cls(
            notif_id=int(record["notif_id"]),
            modality=Modality(record["modality"]),
            asset_ref=str(record["asset_ref"]),
            text=record.get("text"),
            created_at=float(record["created_at"]),
            rule_id=record.get("rule_id"),
        )

    @property
    def topic(self) -> str:
        return f"{NOTIFY_TOPIC_PREFIX}/{self.notif_id}"


@dataclass(frozen=True)
class Predicate:
    op: str                     # equals | less_than | greater_than | any
    value: str | float | None = None

    def evaluate(self, payload: bytes) -> bool:
        """Raises ValueError when the payload does not decode for this op."""
        if self.op == "any":
            return True
        text = payload.decode("utf-8")
        if self.op == "equals":
            if isinstance(self.value, str):
                return text == self.value
            return float(text) == float(self.value)
        number = float(text)
        if self.op == "less_than":
            return number < float(self.value)
        if self.op == "greater_than":
            return number > float(self.value)
        raise RuleConfigError(f"unknown predicate op {self.op!r}")


@dataclass(frozen=True)
class Actuate:
    topic: str
    value: str


@dataclass(frozen=True)
class NotifySpec:
    modality: Modality
    asset_ref: str
    text: str | None = None


Action = Actuate | NotifySpec


@dataclass(frozen=True)
class Confirmation:
    prompt: NotifySpec
    on_confirm: tuple[Action, ...]
    timeout_s: float = DEFAULT_CONFIRM_TIMEOUT_S


@dataclass(frozen=True)
class Rule:
    rule_id: str
    trigger_filter: str
    predicate: Predicate
    actions: tuple[Action, ...] = ()
    confirmation: Confirmation | None = None
    debounce_s: float | None = None


@dataclass
class PendingConfirmation:
    rule_id: str
    notif_id: int
    deadline: float


@dataclass(frozen=True)
class ActuateEmit:
    topic: str
    value: str

    @property
    def outbound(self) -> Outbound:
        return Outbound.text(self.topic, self.value, qos=1)


@dataclass(frozen=True)
class NotifyEmit:
    notification: Notification

    @property
    def outbound(self) -> Outbound:
        return Outbound(topic=self.notification.topic,
                        payload=self.notification.to_payload(), qos=1)


EmittedAction = ActuateEmit | NotifyEmit


class RuleEngine:
    """Evaluates the rule set over a serialized event stream.

    Identical (rule config, event trace, clock) input produces an identical
    emission trace; rules fire in config order, actions in listed order,
    notif_ids strictly increase.
    """

    def __init__(self, rules: list[Rule]):
        seen = set()
        for rule in rules:
            if rule.rule_id in seen:
                raise RuleConfigError(f"duplicate rule id: {rule.rule_id}")
            seen.add(rule.rule_id)
        self.rules = list(rules)
        self._next_notif_id = 1
        self._last_fired: dict[str, float] = {}
        self.pending: dict[str, PendingConfirmation] = {}

    # ------------------------------------------------------------------ #

    def on_event(self, topic: str, payload: bytes, now: float) -> list[EmittedAction]:
        emitted: list[EmittedAction] = []
        for rule in self.rules:
            if not topic_matches(rule.trigger_filter, topic):
                continue
            try:
                if not rule.predicate.evaluate(payload):
                    continue
            except (ValueError, UnicodeDecodeError) as exc:
                log.warning("event=payload_decode_failed rule=%s topic=%s "
                            "payload=%r error=%s", rule.rule_id, topic, payload, exc)
                continue
            if rule.debounce_s is not None:
                last = self._last_fired.get(rule.rule_id)
                if last is not None and now - last < rule.debounce_s:
                    log.debug("event=debounced rule=%s", rule.rule_id)
                    continue
            self._last_fired[rule.rule_id] = now
            emitted.extend(self._fire(rule, now))
        return emitted

    def on_confirm(self, rule_id: str, now: float) -> list[EmittedAction]:
        pending = self.pending.get(rule_id)
        if pending is None:
            log.info("event=confirm_ignored reason=no_pending rule=%s", rule_id)
            return []
        if now > pending.deadline:
            log.info("event=confirm_ignored reason=late rule=%s overshoot=%.3f",
                     rule_id, now - pending.deadline)
            return []
        del self.pending[rule_id]
        rule = self._rule(rule_id)
        emitted: list[EmittedAction] = []
        for action in rule.confirmation.on_confirm:
            emitted.append(self._emit(action, now, rule))
        log.info("event=confirmed rule=%s", rule_id)
        return emitted

    def expire_pending(self, now: float) -> list[str]:
        expired = [rule_id for rule_id, p in self.pending.items()
                   if now > p.deadline]
        for rule_id in expired:
            del self.pending[rule_id]
            log.info("event=confirmation_expired rule=%s", rule_id)
        return expired

    # ------------------------------------------------------------------ #

    def _rule(self, rule_id: str) -> Rule:
        for rule in self.rules:
            if rule.rule_id == rule_id:
                return rule
        raise KeyError(rule_id)

    def _fire(self, rule: Rule, now: float) -> list[EmittedAction]:
        log.info("event=rule_fired rule=%s", rule.rule_id)
        emitted = [self._emit(action, now, rule) for action in rule.actions]
        if rule.confirmation is not None:
            prompt = rule.confirmation.prompt
            notification = self._make_notification(prompt, now, rule_id=rule.rule_id)
            emitted.append(NotifyEmit(notification))
            # one pending instance per rule; a re-trigger refreshes the deadline
            self.pending[rule.rule_id] = PendingConfirmation(
                rule_id=rule.rule_id, notif_id=notification.notif_id,
                deadline=now + rule.confirmation.timeout_s)
        return emitted

    def _emit(self, action: Action, now: float, rule: Rule) -> EmittedAction:
        if isinstance(action, Actuate):
            return ActuateEmit(topic=action.topic, value=action.value)
        return NotifyEmit(self._make_notification(action, now))

    def _make_notification(self, spec: NotifySpec, now: float,
                           rule_id: str | None = None) -> Notification:
        notif_id = self._next_notif_id
        self._next_notif_id += 1
        return Notification(notif_id=notif_id, modality=spec.modality,
                            asset_ref=spec.asset_ref, text=spec.text,
                            created_at=now, rule_id=rule_id)


# --------------------------------------------------------------------------- #
# binding to a connection

class RuleEngineService:
    """Transport glue: routes inbound topics to the engine and converts
    emissions into publishes."""

    SUBSCRIPTIONS = [("home/#", 1), ("patient/qr/#", 1), (CONFIRM_TOPIC, 1)]

    def __init__(self, engine: RuleEngine, trace=None):
        self.engine = engine
        self.trace = trace   # callable(now, EmittedAction) or None

    def handle_message(self, topic: str, payload: bytes, now: float) -> list[Outbound]:
        if topic == CONFIRM_TOPIC:
            try:
                rule_id = str(json.loads(payload.decode("utf-8"))["rule_id"])
            except (ValueError, KeyError, UnicodeDecodeError) as exc:
                log.warning("event=bad_confirm payload=%r error=%s", payload, exc)
                return []
            emitted = self.engine.on_confirm(rule_id, now)
        else:
            emitted = self.engine.on_event(topic, payload, now)
        out = []
        for emission in emitted:
            if self.trace is not None:
                self.trace(now, emission)
            out.append(emission.outbound)
        return out

    def tick(self, now: float) -> None:
        self.engine.expire_pending(now)


# --------------------------------------------------------------------------- #
# configuration

def _parse_action(entry: dict) -> Action:
    if not isinstance(entry, dict) or len(entry) != 1:
        raise RuleConfigError(f"action must be a single-key mapping: {entry!r}")
    key, body = next(iter(entry.items()))
    if key == "actuate":
        return Actuate(topic=str(body["topic"]), value=str(body["value"]))
    if key == "notify":
        return _parse_notify(body)
    raise RuleConfigError(f"unknown action kind {key!r}")


def _parse_notify(body: dict) -> NotifySpec:
    try:
        modality = Modality(str(body["modality"]))
    except (KeyError, ValueError) as exc:
        raise RuleConfigError(f"bad notify spec {body!r}: {exc}") from None
    text = body.get("text")
    if modality == Modality.TEXT and not text:
        raise RuleConfigError(f"text notification needs text: {body!r}")
    return NotifySpec(modality=modality, asset_ref=str(body["asset"]), text=text)


def _parse_trigger(body: dict) -> tuple[str, Predicate]:
    try:
        filter_ = str(body["topic"])
    except KeyError:
        raise RuleConfigError(f"trigger needs a topic: {body!r}") from None
    validate_filter(filter_)
    ops = [op for op in ("equals", "less_than", "greater_than") if op in body]
    if len(ops) > 1:
        raise RuleConfigError(f"trigger has multiple predicates: {body!r}")
    if not ops:
        return filter_, Predicate(op="any")
    op = ops[0]
    value = body[op]
    if op in ("less_than", "greater_than"):
        value = float(value)
    elif not isinstance(value, str):
        value = float(value)
    return filter_, Predicate(op=op, value=value)


def parse_rules(raw: dict) -> list[Rule]:
    if not isinstance(raw, dict) or "rules" not in raw:
        raise RuleConfigError("rule config must be a mapping with a 'rules' list")
    rules = []
    for entry in raw["rules"] or []:
        try:
            filter_, predicate = _parse_trigger(entry["trigger"])
            actions = tuple(_parse_action(a) for a in entry.get("actions") or [])
            confirmation = None
            if "confirmation" in entry:
                body = entry["confirmation"]
                confirmation = Confirmation(
                    prompt=_parse_notify(body["prompt"]),
                    on_confirm=tuple(_parse_action(a)
                                     for a in body.get("on_confirm") or []),
                    timeout_s=float(body.get("timeout_s",
                                             DEFAULT_CONFIRM_TIMEOUT_S)))
            rule = Rule(
                rule_id=str(entry["id"]),
                trigger_filter=filter_,
                predicate=predicate,
                actions=actions,
                confirmation=confirmation,
                debounce_s=(float(entry["debounce_s"])
                            if "debounce_s" in entry else None),
            )
        except (KeyError, TypeError) as exc:
            raise RuleConfigError(f"bad rule entry {entry!r}: {exc}") from None
        rules.append(rule)
    return rules


def load_rules(path: str | Path) -> list[Rule]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_rules(yaml.safe_load(fh) or {})


def default_rules_path() -> Path:
    return Path(__file__).parent / "config" / "rules.yaml"


def default_rules() -> list[Rule]:
    return load_rules(default_rules_path())
