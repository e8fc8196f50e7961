"""Broker state machine: sessions, routing, retained store, store-and-forward.

The core is sans-IO.  Callers (the TCP server or the in-memory virtual
network) register connections by opaque integer id, feed decoded packets in
with an explicit ``now`` timestamp, and apply the returned effects:
:class:`Send` (write an encoded packet to a connection) and :class:`Close`
(drop a connection).  Given the same packet trace and clock, the broker state
and effect stream are fully deterministic.
"""

from __future__ import annotations

import base64
import json
import logging
from collections import deque
from dataclasses import dataclass, field

from . import codec
from .codec import (
    Connack,
    Connect,
    Disconnect,
    Packet,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    Suback,
    Subscribe,
    Unsuback,
    Unsubscribe,
)
from .topics import is_valid_filter, topic_matches

log = logging.getLogger("aalhub.broker")

#: Grace multiplier from the keepalive discipline: a connection is dropped
#: after 1.5x its negotiated keepalive passes without any packet.
KEEPALIVE_GRACE = 1.5

DEFAULT_OFFLINE_QUEUE_CAP = 1024


@dataclass(frozen=True, slots=True)
class Send:
    conn_id: int
    packet: Packet


@dataclass(frozen=True, slots=True)
class Close:
    conn_id: int


Effect = Send | Close


@dataclass
class BrokerConfig:
    max_packet_bytes: int = codec.DEFAULT_MAX_PACKET_BYTES
    offline_queue_cap: int = DEFAULT_OFFLINE_QUEUE_CAP
    max_granted_qos: int = 1


@dataclass(slots=True)
class Message:
    """A routed application message, as stored per subscriber."""

    topic: str
    payload: bytes
    qos: int
    retain: bool
    enqueue_time: float
    dup: bool = False


@dataclass
class Session:
    """Per-client broker state surviving (for persistent sessions) the
    client's connection."""

    client_id: str
    clean_session: bool
    subscriptions: dict[str, int] = field(default_factory=dict)
    conn_id: int | None = None
    keepalive: int = 0
    last_rx: float = 0.0
    offline_queue: deque[Message] = field(default_factory=deque)
    inflight: dict[int, Message] = field(default_factory=dict)
    next_packet_id: int = 1

    @property
    def connected(self) -> bool:
        return self.conn_id is not None

    def allocate_packet_id(self) -> int:
        """Next free id in 1..65535, skipping ids still in flight."""
        for _ in range(codec.MAX_PACKET_ID):
            pid = self.next_packet_id
            self.next_packet_id = pid % codec.MAX_PACKET_ID + 1
            if pid not in self.inflight:
                return pid
        raise RuntimeError("no free packet ids (65535 messages in flight)")


class Broker:
    """Routing core shared by the TCP server and the virtual test network."""

    def __init__(self, config: BrokerConfig | None = None):
        self.config = config or BrokerConfig()
        self.sessions: dict[str, Session] = {}
        self.retained: dict[str, Message] = {}
        # conn_id -> client_id, only while a CONNECT has been accepted
        self._conn_clients: dict[int, str] = {}
        # conn ids seen by connection_made but not yet bound to a session
        self._pending_conns: set[int] = set()

    # ------------------------------------------------------------------ #
    # connection lifecycle

    def connection_made(self, conn_id: int) -> None:
        self._pending_conns.add(conn_id)

    def connection_lost(self, conn_id: int, now: float) -> None:
        """Transport closed underneath us (also called after Close effects)."""
        self._pending_conns.discard(conn_id)
        client_id = self._conn_clients.pop(conn_id, None)
        if client_id is None:
            return
        session = self.sessions.get(client_id)
        if session is None or session.conn_id != conn_id:
            return
        session.conn_id = None
        if session.clean_session:
            del self.sessions[client_id]
            log.info("event=session_discarded client_id=%s", client_id)
        else:
            log.info("event=disconnected client_id=%s queued=%d",
                     client_id, len(session.offline_queue))

    def handle_packet(self, conn_id: int, packet: Packet, now: float) -> list[Effect]:
        """Process one decoded packet; returns transport effects in order."""
        if conn_id not in self._pending_conns and conn_id not in self._conn_clients:
            return [Close(conn_id)]

        client_id = self._conn_clients.get(conn_id)
        if client_id is None:
            if not isinstance(packet, Connect):
                log.warning("event=protocol_violation reason=data_before_connect")
                self._pending_conns.discard(conn_id)
                return [Close(conn_id)]
            return self._handle_connect(conn_id, packet, now)

        session = self.sessions[client_id]
        session.last_rx = now
        if isinstance(packet, Connect):
            log.warning("event=protocol_violation reason=second_connect client_id=%s",
                        client_id)
            return self._drop_connection(conn_id)
        if isinstance(packet, Publish):
            return self._handle_publish(session, packet, now)
        if isinstance(packet, Puback):
            self._handle_puback(session, packet)
            return []
        if isinstance(packet, Subscribe):
            return self._handle_subscribe(session, packet, now)
        if isinstance(packet, Unsubscribe):
            return self._handle_unsubscribe(session, packet)
        if isinstance(packet, Pingreq):
            return [Send(conn_id, Pingresp())]
        if isinstance(packet, Disconnect):
            log.info("event=client_disconnect client_id=%s", client_id)
            return self._drop_connection(conn_id)
        # Server-to-client packet types arriving inbound are violations.
        log.warning("event=protocol_violation reason=unexpected_%s client_id=%s",
                    type(packet).__name__.lower(), client_id)
        return self._drop_connection(conn_id)

    def check_keepalives(self, now: float) -> list[Effect]:
        """Close connections silent past 1.5x their keepalive."""
        effects: list[Effect] = []
        for session in list(self.sessions.values()):
            if not session.connected or session.keepalive == 0:
                continue
            if now - session.last_rx > KEEPALIVE_GRACE * session.keepalive:
                log.info("event=keepalive_expired client_id=%s idle=%.3f",
                         session.client_id, now - session.last_rx)
                effects.extend(self._drop_connection(session.conn_id))
        return effects

    def _drop_connection(self, conn_id: int) -> list[Effect]:
        self.connection_lost(conn_id, 0.0)
        return [Close(conn_id)]

    # ------------------------------------------------------------------ #
    # CONNECT / sessions

    def _handle_connect(self, conn_id: int, packet: Connect, now: float) -> list[Effect]:
        effects: list[Effect] = []
        if not packet.client_id:
            log.warning("event=connect_rejected reason=empty_client_id")
            self._pending_conns.discard(conn_id)
            return [
                Send(conn_id, Connack(False, codec.CONNACK_IDENTIFIER_REJECTED)),
                Close(conn_id),
            ]

        existing = self.sessions.get(packet.client_id)
        if existing is not None and existing.connected:
            # Duplicate client id: the new connection wins.
            log.info("event=evicted client_id=%s old_conn=%d new_conn=%d",
                     packet.client_id, existing.conn_id, conn_id)
            old_conn = existing.conn_id
            self._conn_clients.pop(old_conn, None)
            existing.conn_id = None
            if existing.clean_session:
                del self.sessions[packet.client_id]
                existing = None
            effects.append(Close(old_conn))

        session_present = False
        if packet.clean_session:
            self.sessions.pop(packet.client_id, None)
            session = Session(client_id=packet.client_id, clean_session=True)
            self.sessions[packet.client_id] = session
        else:
            session = self.sessions.get(packet.client_id)
            if session is None:
                session = Session(client_id=packet.client_id, clean_session=False)
                self.sessions[packet.client_id] = session
            else:
                session_present = True

        self._pending_conns.discard(conn_id)
        self._conn_clients[conn_id] = packet.client_id
        session.clean_session = packet.clean_session
        session.conn_id = conn_id
        session.keepalive = packet.keepalive
        session.last_rx = now

        log.info("event=connected client_id=%s clean_session=%s session_present=%s "
                 "keepalive=%d", packet.client_id, packet.clean_session,
                 session_present, packet.keepalive)
        effects.append(Send(conn_id, Connack(session_present=session_present)))

        # Redeliver un-acked in-flight messages first (DUP set), then drain
        # the offline queue in publish order.
        for pid, message in list(session.inflight.items()):
            message.dup = True
            effects.append(Send(conn_id, Publish(
                topic=message.topic, payload=message.payload, qos=1,
                retain=message.retain, dup=True, packet_id=pid)))
        queued = list(session.offline_queue)
        session.offline_queue.clear()
        for message in queued:
            effects.extend(self._deliver(session, message))
        return effects

    # ------------------------------------------------------------------ #
    # PUBLISH path

    def _handle_publish(self, publisher: Session, packet: Publish, now: float) -> list[Effect]:
        effects: list[Effect] = []
        log.debug("event=publish client_id=%s topic=%s qos=%d retain=%s bytes=%d",
                  publisher.client_id, packet.topic, packet.qos, packet.retain,
                  len(packet.payload))

        if packet.retain:
            if packet.payload:
                self.retained[packet.topic] = Message(
                    topic=packet.topic, payload=packet.payload, qos=packet.qos,
                    retain=True, enqueue_time=now)
            else:
                # Zero-length retained payload clears the stored message.
                self.retained.pop(packet.topic, None)

        for session in self.sessions.values():
            sub_qos = self._matching_qos(session, packet.topic)
            if sub_qos is None:
                continue
            message = Message(
                topic=packet.topic, payload=packet.payload,
                qos=min(packet.qos, sub_qos),
                retain=False,  # live fan-out never carries the retain flag
                enqueue_time=now)
            effects.extend(self._deliver(session, message))

        if packet.qos == 1:
            effects.append(Send(publisher.conn_id, Puback(packet.packet_id)))
        return effects

    @staticmethod
    def _matching_qos(session: Session, topic: str) -> int | None:
        """Highest granted QoS among the session's filters matching ``topic``,
        or None when no filter matches (exactly one delivery per session)."""
        best: int | None = None
        for filter_, qos in session.subscriptions.items():
            if topic_matches(filter_, topic):
                best = qos if best is None else max(best, qos)
        return best

    def _deliver(self, session: Session, message: Message) -> list[Effect]:
        if not session.connected:
            # clean sessions are dropped on disconnect, so reaching here
            # implies a persistent session
            queue = session.offline_queue
            if len(queue) >= self.config.offline_queue_cap:
                dropped = queue.popleft()
                log.warning("event=queue_overflow client_id=%s dropped_topic=%s",
                            session.client_id, dropped.topic)
            queue.append(message)
            return []
        if message.qos == 0:
            return [Send(session.conn_id, Publish(
                topic=message.topic, payload=message.payload, qos=0,
                retain=message.retain))]
        pid = session.allocate_packet_id()
        session.inflight[pid] = message
        return [Send(session.conn_id, Publish(
            topic=message.topic, payload=message.payload, qos=1,
            retain=message.retain, dup=message.dup, packet_id=pid))]

    def _handle_puback(self, session: Session, packet: Puback) -> None:
        if session.inflight.pop(packet.packet_id, None) is None:
            log.warning("event=spurious_puback client_id=%s packet_id=%d",
                        session.client_id, packet.packet_id)

    # ------------------------------------------------------------------ #
    # SUBSCRIBE / UNSUBSCRIBE

    def _handle_subscribe(self, session: Session, packet: Subscribe, now: float) -> list[Effect]:
        granted: list[int] = []
        accepted: list[tuple[str, int]] = []
        for filter_, requested_qos in packet.filters:
            if not is_valid_filter(filter_):
                granted.append(codec.SUBACK_FAILURE)
                continue
            qos = min(requested_qos, self.config.max_granted_qos)
            session.subscriptions[filter_] = qos
            granted.append(qos)
            accepted.append((filter_, qos))
            log.info("event=subscribed client_id=%s topic=%s qos=%d",
                     session.client_id, filter_, qos)

        effects: list[Effect] = [
            Send(session.conn_id, Suback(packet_id=packet.packet_id,
                                         return_codes=tuple(granted)))
        ]
        # Retained replay per accepted filter, in stable topic order.
        for filter_, qos in accepted:
            for topic in sorted(self.retained):
                stored = self.retained[topic]
                if not topic_matches(filter_, topic):
                    continue
                message = Message(
                    topic=topic, payload=stored.payload,
                    qos=min(stored.qos, qos), retain=True, enqueue_time=now)
                effects.extend(self._deliver(session, message))
        return effects

    def _handle_unsubscribe(self, session: Session, packet: Unsubscribe) -> list[Effect]:
        for filter_ in packet.filters:
            if session.subscriptions.pop(filter_, None) is not None:
                log.info("event=unsubscribed client_id=%s topic=%s",
                         session.client_id, filter_)
        return [Send(session.conn_id, Unsuback(packet_id=packet.packet_id))]

    # ------------------------------------------------------------------ #
    # snapshot / restore

    def snapshot(self) -> dict:
        """JSON-safe dump of retained messages and persistent sessions.

        In-flight messages are folded to the front of the offline queue so
        they redeliver after a restore."""
        sessions = []
        for session in self.sessions.values():
            if session.clean_session:
                continue
            queue = list(session.inflight.values()) + list(session.offline_queue)
            sessions.append({
                "client_id": session.client_id,
                "subscriptions": session.subscriptions,
                "next_packet_id": session.next_packet_id,
                "queue": [_message_to_json(m) for m in queue],
            })
        return {
            "retained": [_message_to_json(m) for m in self.retained.values()],
            "sessions": sessions,
        }

    def restore(self, data: dict) -> None:
        for entry in data.get("retained", []):
            message = _message_from_json(entry)
            self.retained[message.topic] = message
        for entry in data.get("sessions", []):
            session = Session(client_id=entry["client_id"], clean_session=False)
            session.subscriptions = {
                str(k): int(v) for k, v in entry["subscriptions"].items()}
            session.next_packet_id = int(entry["next_packet_id"])
            session.offline_queue = deque(
                _message_from_json(m) for m in entry["queue"])
            self.sessions[session.client_id] = session

    def save_snapshot(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.snapshot(), fh, indent=1)
        log.info("event=snapshot_saved path=%s", path)

    def load_snapshot(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            self.restore(json.load(fh))
        log.info("event=snapshot_loaded path=%s", path)


def _message_to_json(message: Message) -> dict:
    return {
        "topic": message.topic,
        "payload_b64": base64.b64encode(message.payload).decode("ascii"),
        "qos": message.qos,
        "retain": message.retain,
        "enqueue_time": message.enqueue_time,
    }


def _message_from_json(entry: dict) -> Message:
    return Message(
        topic=entry["topic"],
        payload=base64.b64decode(entry["payload_b64"]),
        qos=int(entry["qos"]),
        retain=bool(entry["retain"]),
        enqueue_time=float(entry["enqueue_time"]),
    )
