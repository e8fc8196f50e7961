"""Asyncio runners binding transport-agnostic services to live broker
connections."""

from __future__ import annotations

import asyncio
import logging
import time
from typing import Callable

from .messages import Outbound
from .mqtt.client import ClientConfig, MqttClient

log = logging.getLogger("aalhub.services")

Handler = Callable[[str, bytes, float], list[Outbound]]


class MqttServiceRunner:
    """Pumps one client's inbound stream through a message handler and
    performs the publishes the handler returns."""

    def __init__(self, client: MqttClient, subscriptions: list[tuple[str, int]],
                 handler: Handler, tick: Callable[[float], None] | None = None,
                 tick_interval: float = 1.0):
        self.client = client
        self.subscriptions = subscriptions
        self.handler = handler
        self.tick = tick
        self.tick_interval = tick_interval
        self._tasks: list[asyncio.Task] = []

    async def start(self) -> bool:
        session_present = await self.client.connect()
        await self.client.subscribe(self.subscriptions)
        self._tasks.append(asyncio.create_task(self._pump()))
        if self.tick is not None:
            self._tasks.append(asyncio.create_task(self._tick_loop()))
        return session_present

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        await self.client.disconnect()

    async def _pump(self) -> None:
        while True:
            message = await self.client.messages.get()
            if message is None:
                log.info("event=stream_ended client_id=%s",
                         self.client.config.client_id)
                return
            outs = self.handler(message.topic, message.payload, time.monotonic())
            for out in outs:
                try:
                    await self.client.publish(out.topic, out.payload,
                                              qos=out.qos, retain=out.retain)
                except Exception as exc:
                    log.warning("event=publish_failed topic=%s error=%s",
                                out.topic, exc)

    async def _tick_loop(self) -> None:
        while True:
            await asyncio.sleep(self.tick_interval)
            self.tick(time.monotonic())


def make_client(client_id: str, host: str, port: int, **kwargs) -> MqttClient:
    return MqttClient(ClientConfig(client_id=client_id, host=host, port=port,
                                   **kwargs))
