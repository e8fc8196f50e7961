"""Asyncio MQTT client used by the device fleet, rule engine, patient agent,
gateway and bench harness."""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass

from ..messages import InboundMessage
from . import codec
from .codec import (
    Connack,
    Connect,
    Disconnect,
    Pingreq,
    Pingresp,
    Puback,
    Publish,
    Suback,
    Subscribe,
    Unsuback,
    Unsubscribe,
)

log = logging.getLogger("aalhub.client")

MAX_CLIENT_ID_LENGTH = 64


class MqttError(Exception):
    pass


class ConnectRefusedError(MqttError):
    def __init__(self, return_code: int):
        super().__init__(f"broker refused connection (return code {return_code})")
        self.return_code = return_code


class NotConnectedError(MqttError):
    pass


@dataclass
class ClientConfig:
    client_id: str
    host: str = "127.0.0.1"
    port: int = 1883
    clean_session: bool = True
    keepalive: int = 60
    connect_timeout: float = 5.0
    ack_timeout: float = 10.0
    #: None disables reconnection; a number is the fixed delay in seconds.
    reconnect_delay: float | None = None

    def __post_init__(self):
        if not self.client_id or len(self.client_id) > MAX_CLIENT_ID_LENGTH:
            raise ValueError(
                f"client_id must be 1..{MAX_CLIENT_ID_LENGTH} chars: {self.client_id!r}")


class MqttClient:
    """One broker connection.

    ``publish`` may be called concurrently from any task; each encoded packet
    is written with a single ``write`` call, so the outbound byte stream never
    interleaves.  Inbound messages are surfaced in connection order on
    :attr:`messages`; a ``None`` sentinel marks the end of the stream when the
    connection dies with reconnection disabled.
    """

    def __init__(self, config: ClientConfig):
        self.config = config
        self.messages: asyncio.Queue[InboundMessage | None] = asyncio.Queue()
        self.session_present: bool | None = None
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._reader_task: asyncio.Task | None = None
        self._keepalive_task: asyncio.Task | None = None
        self._reconnect_task: asyncio.Task | None = None
        self._connack: asyncio.Future | None = None
        self._pending_acks: dict[tuple[str, int], asyncio.Future] = {}
        self._next_packet_id = 1
        self._last_send = 0.0
        self._closing = False
        # filters re-established by the reconnect policy
        self._subscriptions: dict[str, int] = {}

    @property
    def connected(self) -> bool:
        return self._writer is not None and not self._writer.is_closing()

    # ------------------------------------------------------------------ #
    # lifecycle

    async def connect(self) -> bool:
        """Open the connection; returns the broker's session_present flag."""
        self._closing = False
        await self._open_connection()
        return bool(self.session_present)

    async def _open_connection(self) -> None:
        loop = asyncio.get_running_loop()
        try:
            self._reader, self._writer = await asyncio.wait_for(
                asyncio.open_connection(self.config.host, self.config.port),
                timeout=self.config.connect_timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            raise NotConnectedError(
                f"cannot reach broker at {self.config.host}:{self.config.port}: {exc}"
            ) from exc
        self._connack = loop.create_future()
        self._reader_task = asyncio.create_task(self._read_loop())
        self._send(Connect(client_id=self.config.client_id,
                           clean_session=self.config.clean_session,
                           keepalive=self.config.keepalive))
        try:
            connack: Connack = await asyncio.wait_for(
                self._connack, timeout=self.config.connect_timeout)
        except asyncio.TimeoutError:
            await self.close()
            raise NotConnectedError("timed out waiting for CONNACK") from None
        if connack.return_code != codec.CONNACK_ACCEPTED:
            await self.close()
            raise ConnectRefusedError(connack.return_code)
        self.session_present = connack.session_present
        if self._keepalive_task is None and self.config.keepalive > 0:
            self._keepalive_task = asyncio.create_task(self._keepalive_loop())

    async def disconnect(self) -> None:
        """Graceful DISCONNECT then close."""
        self._closing = True
        if self.connected:
            try:
                self._send(Disconnect())
                await self._writer.drain()
            except (MqttError, ConnectionError):
                pass
        await self.close()

    async def close(self) -> None:
        self._closing = True
        for task in (self._keepalive_task, self._reader_task, self._reconnect_task):
            if task is not None and task is not asyncio.current_task():
                task.cancel()
        self._keepalive_task = None
        if self._writer is not None:
            self._writer.close()
            self._writer = None
        self._fail_pending(NotConnectedError("connection closed"))

    # ------------------------------------------------------------------ #
    # operations

    async def publish(self, topic: str, payload: bytes | str, qos: int = 0,
                      retain: bool = False) -> None:
        """QoS 0: returns once written.  QoS 1: returns once PUBACKed."""
        data = payload.encode("utf-8") if isinstance(payload, str) else payload
        if not self.connected:
            raise NotConnectedError("publish on a closed connection")
        if qos == 0:
            self._send(Publish(topic=topic, payload=data, qos=0, retain=retain))
            await self._writer.drain()
            return
        packet_id = self._take_packet_id()
        future = asyncio.get_running_loop().create_future()
        self._pending_acks[("puback", packet_id)] = future
        self._send(Publish(topic=topic, payload=data, qos=1, retain=retain,
                           packet_id=packet_id))
        await asyncio.wait_for(future, timeout=self.config.ack_timeout)

    async def subscribe(self, filters: list[tuple[str, int]] | list[str]) -> list[int]:
        """Returns granted QoS per filter; 0x80 marks a refusal."""
        normalized = tuple((f, 1) if isinstance(f, str) else f for f in filters)
        if not self.connected:
            raise NotConnectedError("subscribe on a closed connection")
        packet_id = self._take_packet_id()
        future = asyncio.get_running_loop().create_future()
        self._pending_acks[("suback", packet_id)] = future
        self._send(Subscribe(packet_id=packet_id, filters=normalized))
        suback: Suback = await asyncio.wait_for(
            future, timeout=self.config.ack_timeout)
        for (filter_, _), granted in zip(normalized, suback.return_codes):
            if granted != codec.SUBACK_FAILURE:
                self._subscriptions[filter_] = granted
        return list(suback.return_codes)

    async def unsubscribe(self, filters: list[str]) -> None:
        if not self.connected:
            raise NotConnectedError("unsubscribe on a closed connection")
        packet_id = self._take_packet_id()
        future = asyncio.get_running_loop().create_future()
        self._pending_acks[("unsuback", packet_id)] = future
        self._send(Unsubscribe(packet_id=packet_id, filters=tuple(filters)))
        await asyncio.wait_for(future, timeout=self.config.ack_timeout)
        for filter_ in filters:
            self._subscriptions.pop(filter_, None)

    def drive_keepalive(self, now: float) -> bool:
        """Send a PINGREQ when the connection has been send-idle for a full
        keepalive period.  Returns True when a ping was issued."""
        if not self.connected or self.config.keepalive == 0:
            return False
        if now - self._last_send >= self.config.keepalive:
            self._send(Pingreq())
            return True
        return False

    # ------------------------------------------------------------------ #
    # internals

    def _take_packet_id(self) -> int:
        pid = self._next_packet_id
        self._next_packet_id = pid % codec.MAX_PACKET_ID + 1
        return pid

    def _send(self, packet: codec.Packet) -> None:
        if self._writer is None or self._writer.is_closing():
            raise NotConnectedError("connection closed")
        self._writer.write(codec.encode_packet(packet))
        self._last_send = time.monotonic()

    def _fail_pending(self, error: Exception) -> None:
        # the connack future is always awaited by _open_connection
        if self._connack is not None and not self._connack.done():
            self._connack.set_exception(error)
        pending, self._pending_acks = self._pending_acks, {}
        for future in pending.values():
            if not future.done():
                future.set_exception(error)

    async def _keepalive_loop(self) -> None:
        interval = max(0.05, min(1.0, self.config.keepalive / 4))
        while True:
            await asyncio.sleep(interval)
            try:
                self.drive_keepalive(time.monotonic())
            except NotConnectedError:
                return

    async def _read_loop(self) -> None:
        assert self._reader is not None
        decoder = codec.StreamDecoder()
        try:
            while True:
                data = await self._reader.read(65536)
                if not data:
                    break
                for packet in decoder.feed(data):
                    self._dispatch(packet)
        except (ConnectionResetError, codec.MalformedPacketError) as exc:
            log.warning("event=connection_error client_id=%s error=%s",
                        self.config.client_id, exc)
        except asyncio.CancelledError:
            return
        if self._writer is not None:
            self._writer.close()
        self._fail_pending(NotConnectedError("connection lost"))
        if not self._closing and self.config.reconnect_delay is not None:
            self._reconnect_task = asyncio.create_task(self._reconnect_loop())
        elif not self._closing:
            self.messages.put_nowait(None)

    async def _reconnect_loop(self) -> None:
        while not self._closing:
            await asyncio.sleep(self.config.reconnect_delay)
            try:
                await self._open_connection()
            except MqttError as exc:
                log.info("event=reconnect_failed client_id=%s error=%s",
                         self.config.client_id, exc)
                continue
            if self.config.clean_session and self._subscriptions:
                try:
                    await self.subscribe(list(self._subscriptions.items()))
                except MqttError:
                    continue
            log.info("event=reconnected client_id=%s", self.config.client_id)
            return

    def _dispatch(self, packet: codec.Packet) -> None:
        if isinstance(packet, Publish):
            if packet.qos == 1:
                try:
                    self._send(Puback(packet_id=packet.packet_id))
                except NotConnectedError:
                    pass
            self.messages.put_nowait(InboundMessage(
                topic=packet.topic, payload=packet.payload, qos=packet.qos,
                retain=packet.retain, dup=packet.dup, packet_id=packet.packet_id))
        elif isinstance(packet, Connack):
            if self._connack is not None and not self._connack.done():
                self._connack.set_result(packet)
        elif isinstance(packet, Puback):
            future = self._pending_acks.pop(("puback", packet.packet_id), None)
            if future is not None and not future.done():
                future.set_result(None)
        elif isinstance(packet, Suback):
            future = self._pending_acks.pop(("suback", packet.packet_id), None)
            if future is not None and not future.done():
                future.set_result(packet)
        elif isinstance(packet, Unsuback):
            future = self._pending_acks.pop(("unsuback", packet.packet_id), None)
            if future is not None and not future.done():
                future.set_result(None)
        elif isinstance(packet, Pingresp):
            pass
        else:
            log.warning("event=unexpected_packet client_id=%s packet=%r",
                        self.config.client_id, packet)
