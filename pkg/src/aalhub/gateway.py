"""WebSocket/JSON bridge between the broker and caregiver dashboards.

Dashboards get one protocol: JSON text frames over ``/events``.  On connect
the current home state (retained device topics) is replayed as a snapshot,
then live events stream in broker-delivery order; every event frame carries a
per-connection strictly-increasing ``seq`` so clients can detect gaps and
resync.  Inbound frames are commands; publishes are restricted to actuator
``/set`` topics and the notification namespace.

Frame shapes (also documented in the README):

* server -> client:
  ``{"type": "event", "seq", "topic", "payload", "encoding", "retain", "server_time"}``
  ``{"type": "ack", "id", "ok": true, ...}`` / ``{"type": "error", "id", "error"}``
* client -> server:
  ``{"action": "publish", "topic", "payload", "id"?}``
  ``{"action": "notify", "modality", "asset", "text"?, "id"?}``
"""

from __future__ import annotations

import asyncio
import base64
import contextlib
import json
import logging
import time
from dataclasses import asdict

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .messages import HOME_PREFIX, InboundMessage, NOTIFY_TOPIC_PREFIX
from .mqtt.client import ClientConfig, MqttClient, MqttError
from .mqtt.topics import topic_matches
from .qr_sizing import QrSizingInput, ScanConditions, format_report, min_qr_size
from .rules import Modality, Notification

log = logging.getLogger("aalhub.gateway")

#: topics a dashboard may publish to
COMMAND_ALLOW_LIST = (f"{HOME_PREFIX}/+/+/set", f"{NOTIFY_TOPIC_PREFIX}/#")

#: manual reminders get ids from a disjoint range so they never collide with
#: the rule engine's counter
MANUAL_NOTIF_ID_BASE = 1_000_000

RECONNECT_DELAY_S = 1.0


def command_topic_allowed(topic: str) -> bool:
    return any(topic_matches(filter_, topic) for filter_ in COMMAND_ALLOW_LIST)


def _payload_fields(payload: bytes) -> tuple[str, str]:
    try:
        return payload.decode("utf-8"), "utf8"
    except UnicodeDecodeError:
        return base64.b64encode(payload).decode("ascii"), "base64"


class DashboardConnection:
    def __init__(self):
        self.queue: asyncio.Queue[dict] = asyncio.Queue()
        self.next_seq = 1

    def push_event(self, record: dict) -> None:
        frame = dict(record)
        frame["type"] = "event"
        frame["seq"] = self.next_seq
        self.next_seq += 1
        self.queue.put_nowait(frame)

    def push_raw(self, frame: dict) -> None:
        self.queue.put_nowait(frame)


class GatewayHub:
    """Upstream broker session, home-state snapshot and dashboard fan-out."""

    def __init__(self, broker_host: str, broker_port: int,
                 client_id: str = "gateway"):
        self.broker_host = broker_host
        self.broker_port = broker_port
        self.client_id = client_id
        self.broker_connected = False
        self._client: MqttClient | None = None
        self._snapshot: dict[str, dict] = {}
        self._connections: list[DashboardConnection] = []
        self._task: asyncio.Task | None = None
        self._stopping = False
        self._next_manual_id = MANUAL_NOTIF_ID_BASE

    async def start(self) -> None:
        self._task = asyncio.create_task(self._mqtt_loop())

    async def stop(self) -> None:
        self._stopping = True
        if self._task is not None:
            self._task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._task
        if self._client is not None:
            await self._client.close()

    # ------------------------------------------------------------------ #

    async def _mqtt_loop(self) -> None:
        while not self._stopping:
            client = MqttClient(ClientConfig(
                client_id=self.client_id, host=self.broker_host,
                port=self.broker_port, keepalive=30))
            try:
                await client.connect()
                await client.subscribe([(f"{HOME_PREFIX}/#", 1), ("patient/#", 1)])
            except MqttError:
                self.broker_connected = False
                await asyncio.sleep(RECONNECT_DELAY_S)
                continue
            self._client = client
            self.broker_connected = True
            log.info("event=broker_connected host=%s port=%d",
                     self.broker_host, self.broker_port)
            while True:
                message = await client.messages.get()
                if message is None:
                    break
                self._ingest(message)
            self.broker_connected = False
            self._client = None
            log.warning("event=broker_disconnected")
            await asyncio.sleep(RECONNECT_DELAY_S)

    def _ingest(self, message: InboundMessage) -> None:
        payload, encoding = _payload_fields(message.payload)
        record = {
            "topic": message.topic,
            "payload": payload,
            "encoding": encoding,
            "retain": message.retain,
            "server_time": time.time(),
        }
        # Device topics are retained by design: they form the snapshot a
        # late dashboard replays.  Patient traffic streams live only.
        if message.topic.startswith(f"{HOME_PREFIX}/"):
            snapshot_record = dict(record)
            snapshot_record["retain"] = True
            self._snapshot[message.topic] = snapshot_record
        for conn in self._connections:
            conn.push_event(record)

    # ------------------------------------------------------------------ #

    def attach(self) -> DashboardConnection:
        """Register a dashboard: snapshot first, then the live stream.

        Runs without awaits, so no event can fall between the snapshot copy
        and the subscription."""
        conn = DashboardConnection()
        for topic in sorted(self._snapshot):
            conn.push_event(self._snapshot[topic])
        self._connections.append(conn)
        return conn

    def detach(self, conn: DashboardConnection) -> None:
        if conn in self._connections:
            self._connections.remove(conn)

    # ------------------------------------------------------------------ #

    async def handle_command_frame(self, conn: DashboardConnection, text: str) -> None:
        try:
            frame = json.loads(text)
            if not isinstance(frame, dict):
                raise ValueError("frame must be a JSON object")
        except ValueError as exc:
            conn.push_raw({"type": "error", "id": None,
                           "error": f"malformed frame: {exc}"})
            return
        frame_id = frame.get("id")
        try:
            action = frame.get("action")
            if action == "publish":
                await self._command_publish(frame)
                conn.push_raw({"type": "ack", "id": frame_id, "ok": True})
            elif action == "notify":
                notif_id = await self._command_notify(frame)
                conn.push_raw({"type": "ack", "id": frame_id, "ok": True,
                               "notif_id": notif_id})
            else:
                raise CommandRejected(f"unknown action {action!r}")
        except CommandRejected as exc:
            conn.push_raw({"type": "error", "id": frame_id, "error": str(exc)})
        except (MqttError, asyncio.TimeoutError) as exc:
            conn.push_raw({"type": "error", "id": frame_id,
                           "error": f"broker unavailable: {exc}"})

    async def _command_publish(self, frame: dict) -> None:
        topic = frame.get("topic")
        payload = frame.get("payload")
        if not isinstance(topic, str) or not isinstance(payload, str):
            raise CommandRejected("publish needs string 'topic' and 'payload'")
        if not command_topic_allowed(topic):
            raise CommandRejected(f"topic not writable: {topic}")
        await self._publish(topic, payload.encode("utf-8"))

    async def _command_notify(self, frame: dict) -> int:
        try:
            modality = Modality(str(frame.get("modality")))
        except ValueError:
            raise CommandRejected(
                f"unknown modality {frame.get('modality')!r}") from None
        asset = frame.get("asset")
        if not isinstance(asset, str) or not asset:
            raise CommandRejected("notify needs a nonempty 'asset'")
        text = frame.get("text")
        if modality == Modality.TEXT and not text:
            raise CommandRejected("text notifications need 'text'")
        notif_id = self._next_manual_id
        self._next_manual_id += 1
        notification = Notification(
            notif_id=notif_id, modality=modality, asset_ref=asset,
            text=text, created_at=time.time())
        await self._publish(notification.topic, notification.to_payload())
        return notif_id

    async def _publish(self, topic: str, payload: bytes) -> None:
        client = self._client
        if client is None or not self.broker_connected:
            raise MqttError("no broker session")
        await client.publish(topic, payload, qos=1)


class CommandRejected(Exception):
    pass


# --------------------------------------------------------------------------- #


def create_app(broker_host: str = "127.0.0.1", broker_port: int = 1883,
               token: str | None = None) -> FastAPI:
    hub = GatewayHub(broker_host, broker_port)

    @contextlib.asynccontextmanager
    async def lifespan(_app: FastAPI):
        await hub.start()
        try:
            yield
        finally:
            await hub.stop()

    app = FastAPI(title="aalhub gateway", lifespan=lifespan)
    app.state.hub = hub

    @app.get("/health")
    async def health() -> dict:
        return {"status": "ok", "broker_connected": hub.broker_connected}

    @app.get("/qr-size")
    async def qr_size(d_scan_mm: float = 300.0, poor_lighting: bool = False,
                      mid_light_colored_code: bool = False,
                      not_front_on: bool = False, modules_per_side: int = 21,
                      pixels_per_module: int = 10, fov_mm: float = 340.0,
                      resolution_pixels: float = 12_000_000,
                      aspect_phi: float | None = None) -> dict:
        inputs = QrSizingInput(
            d_scan_mm=d_scan_mm,
            conditions=ScanConditions(
                poor_lighting=poor_lighting,
                mid_light_colored_code=mid_light_colored_code,
                not_front_on=not_front_on),
            modules_per_side=modules_per_side,
            pixels_per_module=pixels_per_module,
            fov_mm=fov_mm,
            resolution_pixels=resolution_pixels,
            **({"aspect_phi": aspect_phi} if aspect_phi else {}))
        result = min_qr_size(inputs)
        return {"result": asdict(result),
                "report": format_report(inputs, result)}

    @app.websocket("/events")
    async def events(ws: WebSocket) -> None:
        if token is not None and ws.query_params.get("token") != token:
            await ws.close(code=4401)
            return
        await ws.accept()
        if not hub.broker_connected:
            # ask the dashboard to try again later
            await ws.close(code=1013, reason="broker unavailable")
            return
        conn = hub.attach()
        sender = asyncio.create_task(_send_frames(ws, conn))
        try:
            while True:
                text = await ws.receive_text()
                await hub.handle_command_frame(conn, text)
        except WebSocketDisconnect:
            pass
        finally:
            sender.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await sender
            hub.detach(conn)

    return app


async def _send_frames(ws: WebSocket, conn: DashboardConnection) -> None:
    while True:
        frame = await conn.queue.get()
        await ws.send_text(json.dumps(frame))


def run_gateway(host: str, port: int, broker_host: str, broker_port: int,
                token: str | None, log_level: str = "info") -> None:
    import uvicorn

    app = create_app(broker_host, broker_port, token=token)
    uvicorn.run(app, host=host, port=port, log_level=log_level)
