"""Asyncio TCP front end for the broker core.

One reader task per connection feeds decoded packets into the shared
:class:`~aalhub.mqtt.broker.Broker`; because the event loop serializes those
calls, cross-session routing stays linearizable without locks.
"""

from __future__ import annotations

import asyncio
import logging
import time

from . import codec
from .broker import Broker, BrokerConfig, Close, Effect, Send

log = logging.getLogger("aalhub.broker")

KEEPALIVE_SWEEP_INTERVAL = 0.25


class BrokerServer:
    def __init__(self, host: str = "127.0.0.1", port: int = 1883,
                 config: BrokerConfig | None = None,
                 snapshot_path: str | None = None):
        self.host = host
        self.requested_port = port
        self.broker = Broker(config)
        self.snapshot_path = snapshot_path
        self._server: asyncio.Server | None = None
        self._writers: dict[int, asyncio.StreamWriter] = {}
        self._next_conn_id = 1
        self._sweep_task: asyncio.Task | None = None

    @property
    def port(self) -> int:
        assert self._server is not None, "server not started"
        return self._server.sockets[0].getsockname()[1]

    async def start(self) -> None:
        if self.snapshot_path:
            try:
                self.broker.load_snapshot(self.snapshot_path)
            except FileNotFoundError:
                pass
        self._server = await asyncio.start_server(
            self._serve_connection, self.host, self.requested_port)
        self._sweep_task = asyncio.create_task(self._keepalive_sweep())
        log.info("event=listening host=%s port=%d", self.host, self.port)

    async def stop(self) -> None:
        if self._sweep_task:
            self._sweep_task.cancel()
            try:
                await self._sweep_task
            except asyncio.CancelledError:
                pass
        if self._server:
            self._server.close()
            await self._server.wait_closed()
        for writer in list(self._writers.values()):
            writer.close()
        if self.snapshot_path:
            self.broker.save_snapshot(self.snapshot_path)

    async def serve_forever(self) -> None:
        assert self._server is not None
        await self._server.serve_forever()

    # ------------------------------------------------------------------ #

    @staticmethod
    def _now() -> float:
        return time.monotonic()

    async def _keepalive_sweep(self) -> None:
        while True:
            await asyncio.sleep(KEEPALIVE_SWEEP_INTERVAL)
            await self._apply(self.broker.check_keepalives(self._now()))

    async def _serve_connection(self, reader: asyncio.StreamReader,
                                writer: asyncio.StreamWriter) -> None:
        conn_id = self._next_conn_id
        self._next_conn_id += 1
        self._writers[conn_id] = writer
        self.broker.connection_made(conn_id)
        decoder = codec.StreamDecoder(
            max_packet_bytes=self.broker.config.max_packet_bytes)
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                try:
                    packets = decoder.feed(data)
                except codec.MalformedPacketError as exc:
                    log.warning("event=malformed_packet conn=%d error=%s",
                                conn_id, exc)
                    break
                for packet in packets:
                    effects = self.broker.handle_packet(
                        conn_id, packet, self._now())
                    await self._apply(effects)
                    if conn_id not in self._writers:
                        return
        except (ConnectionResetError, asyncio.IncompleteReadError):
            pass
        finally:
            self.broker.connection_lost(conn_id, self._now())
            self._close_writer(conn_id)

    async def _apply(self, effects: list[Effect]) -> None:
        for effect in effects:
            if isinstance(effect, Send):
                writer = self._writers.get(effect.conn_id)
                if writer is None:
                    continue
                writer.write(codec.encode_packet(effect.packet))
                try:
                    await writer.drain()
                except ConnectionError:
                    pass
            elif isinstance(effect, Close):
                self._close_writer(effect.conn_id)

    def _close_writer(self, conn_id: int) -> None:
        writer = self._writers.pop(conn_id, None)
        if writer is not None:
            writer.close()


async def run_broker(host: str, port: int, config: BrokerConfig,
                     snapshot_path: str | None) -> None:
    server = BrokerServer(host, port, config, snapshot_path)
    await server.start()
    try:
        await server.serve_forever()
    except asyncio.CancelledError:
        pass
    finally:
        await server.stop()
