"""Message records shared by transports and application components."""

from __future__ import annotations

from dataclasses import dataclass

#: Topic namespace roots.
HOME_PREFIX = "home"
NOTIFY_TOPIC_PREFIX = "patient/notify"
QR_TOPIC_PREFIX = "patient/qr"
CONFIRM_TOPIC = "patient/confirm"


@dataclass(frozen=True, slots=True)
class InboundMessage:
    """An application message as delivered by the broker."""

    topic: str
    payload: bytes
    qos: int
    retain: bool
    dup: bool = False
    packet_id: int | None = None


@dataclass(frozen=True, slots=True)
class Outbound:
    """A publish a component wants performed on its connection."""

    topic: str
    payload: bytes
    qos: int = 1
    retain: bool = False

    @classmethod
    def text(cls, topic: str, text: str, qos: int = 1, retain: bool = False) -> "Outbound":
        return cls(topic=topic, payload=text.encode("utf-8"), qos=qos, retain=retain)
