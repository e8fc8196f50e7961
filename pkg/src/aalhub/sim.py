"""Deterministic single-process harness: virtual clock plus an in-memory
network that drives the broker core.

Every packet still crosses a byte boundary through the wire codec, so virtual
runs exercise exactly the same framing as TCP runs.  All work is processed
from one FIFO queue, which makes any scenario a pure function of (event
script, clock): traces are byte-identical across runs.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import Callable

from .messages import InboundMessage
from .mqtt import codec
from .mqtt.broker import Broker, BrokerConfig, Close, Send
from .mqtt.codec import (
    Connack,
    Connect,
    Disconnect,
    Packet,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    StreamDecoder,
    Suback,
    Subscribe,
    Unsuback,
    Unsubscribe,
)

log = logging.getLogger("aalhub.sim")


class VirtualClock:
    """Simulation clock; time only moves when the test advances it."""

    def __init__(self, start: float = 0.0):
        self._now = start

    @property
    def now(self) -> float:
        return self._now

    def advance(self, delta: float) -> None:
        if delta < 0:
            raise ValueError("clock cannot move backwards")
        self._now += delta

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"clock cannot move backwards to {t} from {self._now}")
        self._now = t


class VirtualConnectionClosed(RuntimeError):
    pass


class VirtualConnection:
    """Client endpoint of one in-memory broker connection.

    ``publish``/``subscribe`` are synchronous: by the time they return, the
    network has been pumped to quiescence and every knock-on effect (rule
    firings, actuator confirms, notifications) has been applied.
    """

    def __init__(self, net: "VirtualNetwork", conn_id: int, client_id: str,
                 auto_ack: bool):
        self._net = net
        self.conn_id = conn_id
        self.client_id = client_id
        self.auto_ack = auto_ack
        self.closed = False
        self.session_present: bool | None = None
        self.return_code: int | None = None
        self.granted: list[int] = []
        self.inbox: list[InboundMessage] = []
        self.unacked_publishes: set[int] = set()
        self.pingresp_count = 0
        self.on_message: Callable[[InboundMessage], None] | None = None
        self._decoder = StreamDecoder()
        self._next_packet_id = 1

    # -- client API ------------------------------------------------------- #

    def publish(self, topic: str, payload: bytes | str, qos: int = 0,
                retain: bool = False) -> int | None:
        data = payload.encode() if isinstance(payload, str) else payload
        packet_id = None
        if qos == 1:
            packet_id = self._next_packet_id
            self._next_packet_id = self._next_packet_id % codec.MAX_PACKET_ID + 1
            self.unacked_publishes.add(packet_id)
        self._send(Publish(topic=topic, payload=data, qos=qos,
                           retain=retain, packet_id=packet_id))
        return packet_id

    def subscribe(self, filters: list[tuple[str, int]] | list[str]) -> list[int]:
        normalized = tuple(
            (f, 1) if isinstance(f, str) else f for f in filters)
        self.granted = []
        self._send(Subscribe(packet_id=self._take_packet_id(), filters=normalized))
        return list(self.granted)

    def unsubscribe(self, filters: list[str]) -> None:
        self._send(Unsubscribe(packet_id=self._take_packet_id(),
                               filters=tuple(filters)))

    def ping(self) -> None:
        self._send(Pingreq())

    def puback(self, packet_id: int) -> None:
        """Manual acknowledgement (connections opened with auto_ack=False)."""
        self._send(Puback(packet_id=packet_id))

    def disconnect(self) -> None:
        """Graceful DISCONNECT."""
        if not self.closed:
            self._send(Disconnect())

    def drop(self) -> None:
        """Abrupt connection loss without a DISCONNECT packet."""
        if not self.closed:
            self.closed = True
            self._net._connection_dropped(self.conn_id)

    # -- wiring ------------------------------------------------------------ #

    def _take_packet_id(self) -> int:
        pid = self._next_packet_id
        self._next_packet_id = pid % codec.MAX_PACKET_ID + 1
        return pid

    def _send(self, packet: Packet) -> None:
        if self.closed:
            raise VirtualConnectionClosed(f"{self.client_id}: connection closed")
        self._net._to_broker(self.conn_id, codec.encode_packet(packet))

    def _receive_bytes(self, data: bytes) -> None:
        for packet in self._decoder.feed(data):
            self._dispatch(packet)

    def _dispatch(self, packet: Packet) -> None:
        if isinstance(packet, Publish):
            message = InboundMessage(
                topic=packet.topic, payload=packet.payload, qos=packet.qos,
                retain=packet.retain, dup=packet.dup, packet_id=packet.packet_id)
            if packet.qos == 1 and self.auto_ack:
                self._send(Puback(packet_id=packet.packet_id))
            self.inbox.append(message)
            if self.on_message is not None:
                self.on_message(message)
        elif isinstance(packet, Puback):
            self.unacked_publishes.discard(packet.packet_id)
        elif isinstance(packet, Connack):
            self.session_present = packet.session_present
            self.return_code = packet.return_code
        elif isinstance(packet, Suback):
            self.granted = list(packet.return_codes)
        elif isinstance(packet, Pingresp):
            self.pingresp_count += 1
        elif isinstance(packet, Unsuback):
            pass
        else:  # pragma: no cover - broker never sends anything else
            log.warning("unexpected packet at client %s: %r", self.client_id, packet)


class VirtualNetwork:
    """Broker core plus any number of in-memory client connections."""

    def __init__(self, clock: VirtualClock | None = None,
                 config: BrokerConfig | None = None):
        self.clock = clock or VirtualClock()
        self.broker = Broker(config)
        self._conns: dict[int, VirtualConnection] = {}
        self._broker_decoders: dict[int, StreamDecoder] = {}
        self._next_conn_id = 1
        self._work: deque[tuple[str, int, bytes]] = deque()
        self._pumping = False

    def connect(self, client_id: str, *, clean_session: bool = True,
                keepalive: int = 0, auto_ack: bool = True,
                on_message: Callable[[InboundMessage], None] | None = None,
                ) -> VirtualConnection:
        conn_id = self._next_conn_id
        self._next_conn_id += 1
        conn = VirtualConnection(self, conn_id, client_id, auto_ack)
        conn.on_message = on_message
        self._conns[conn_id] = conn
        self._broker_decoders[conn_id] = StreamDecoder(
            max_packet_bytes=self.broker.config.max_packet_bytes)
        self.broker.connection_made(conn_id)
        conn._send(Connect(client_id=client_id, clean_session=clean_session,
                           keepalive=keepalive))
        if conn.return_code not in (None, codec.CONNACK_ACCEPTED):
            raise VirtualConnectionClosed(
                f"{client_id}: CONNACK return code {conn.return_code}")
        return conn

    def tick(self) -> None:
        """Run the broker's keepalive sweep at the current virtual time."""
        self._apply_effects(self.broker.check_keepalives(self.clock.now))
        self._pump()

    # -- internals ---------------------------------------------------------- #

    def _to_broker(self, conn_id: int, data: bytes) -> None:
        self._work.append(("c2b", conn_id, data))
        self._pump()

    def _connection_dropped(self, conn_id: int) -> None:
        self._work.append(("lost", conn_id, b""))
        self._pump()

    def _pump(self) -> None:
        if self._pumping:
            return
        self._pumping = True
        try:
            while self._work:
                kind, conn_id, data = self._work.popleft()
                if kind == "lost":
                    self.broker.connection_lost(conn_id, self.clock.now)
                    self._broker_decoders.pop(conn_id, None)
                    continue
                if kind == "b2c":
                    conn = self._conns.get(conn_id)
                    if conn is not None and not conn.closed:
                        conn._receive_bytes(data)
                    continue
                if kind == "close":
                    self._close_conn(conn_id)
                    continue
                # client-to-broker bytes
                decoder = self._broker_decoders.get(conn_id)
                if decoder is None:
                    continue
                try:
                    packets = decoder.feed(data)
                except codec.MalformedPacketError as exc:
                    log.warning("event=malformed_packet conn=%d error=%s",
                                conn_id, exc)
                    self._close_conn(conn_id)
                    continue
                for packet in packets:
                    effects = self.broker.handle_packet(
                        conn_id, packet, self.clock.now)
                    self._apply_effects(effects)
        finally:
            self._pumping = False

    def _apply_effects(self, effects) -> None:
        # Effects stay FIFO with in-flight byte deliveries: a CONNACK queued
        # before a Close must reach the client before the close lands.
        for effect in effects:
            if isinstance(effect, Send):
                self._work.append(
                    ("b2c", effect.conn_id, codec.encode_packet(effect.packet)))
            elif isinstance(effect, Close):
                self._work.append(("close", effect.conn_id, b""))

    def _close_conn(self, conn_id: int) -> None:
        self.broker.connection_lost(conn_id, self.clock.now)
        self._broker_decoders.pop(conn_id, None)
        conn = self._conns.get(conn_id)
        if conn is not None:
            conn.closed = True
