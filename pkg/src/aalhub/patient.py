"""Patient-side glasses agent: tag scans with the 3-second detection cutoff,
a render log for received notifications, and confirmations.

Rendering is simulated: each notification costs a configurable wall/virtual
time per modality and notifications render one at a time.  The costs default
to the means measured on the reference smartphone deployment (audio 364 ms,
three-dimensional image 106 ms) so end-to-end timings have realistic shape;
they are simulation parameters, not claims.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .messages import CONFIRM_TOPIC, NOTIFY_TOPIC_PREFIX, QR_TOPIC_PREFIX, Outbound
from .rules import Modality, Notification

log = logging.getLogger("aalhub.patient")

#: Detection gives up when recognizing a tag takes longer than this.
QR_DETECT_TIMEOUT_S = 3.0

DEFAULT_AUDIO_RENDER_MS = 364.0
DEFAULT_IMAGE_RENDER_MS = 106.0


class ScanInProgressError(RuntimeError):
    """Tags are recognized one at a time; a second scan cannot start."""


@dataclass(frozen=True)
class RenderCosts:
    audio_ms: float = DEFAULT_AUDIO_RENDER_MS
    image_ms: float = DEFAULT_IMAGE_RENDER_MS
    text_ms: float = 0.0

    def for_modality(self, modality: Modality) -> float:
        if modality == Modality.AUDIO:
            return self.audio_ms
        if modality == Modality.IMAGE3D:
            return self.image_ms
        return self.text_ms

    @classmethod
    def zero(cls) -> "RenderCosts":
        return cls(audio_ms=0.0, image_ms=0.0, text_ms=0.0)

    @classmethod
    def parse(cls, text: str) -> "RenderCosts":
        """Parse the CLI form ``t_audio,t_image`` (milliseconds)."""
        audio_ms, image_ms = (float(part) for part in text.split(","))
        return cls(audio_ms=audio_ms, image_ms=image_ms)


@dataclass(frozen=True)
class ScanOutcome:
    tag_id: str
    detected: bool
    started_at: float
    #: scan end: detection instant, or the timeout cutoff
    finished_at: float
    #: publish to perform at ``finished_at`` when detected
    outbound: Outbound | None


@dataclass(frozen=True)
class RenderLogEntry:
    notif_id: int
    modality: Modality
    asset_ref: str
    text: str | None
    receive_time: float
    render_complete_time: float
    rule_id: str | None = None

    def to_json(self) -> str:
        return json.dumps({
            "notif_id": self.notif_id,
            "modality": self.modality.value,
            "asset_ref": self.asset_ref,
            "text": self.text,
            "receive_time": self.receive_time,
            "render_complete_time": self.render_complete_time,
            "rule_id": self.rule_id,
        }, sort_keys=True)


class PatientAgent:
    def __init__(self, costs: RenderCosts | None = None):
        self.costs = costs or RenderCosts()
        self.render_log: list[RenderLogEntry] = []
        self._seen_notif_ids: set[int] = set()
        self._busy_until = float("-inf")
        self._render_free_at = float("-inf")

    # ------------------------------------------------------------------ #
    # tag scanning

    def scan_qr(self, tag_id: str, detect_latency: float, now: float) -> ScanOutcome:
        """Attempt one tag recognition taking ``detect_latency`` seconds.

        Detection succeeds iff the latency is within the cutoff (boundary
        inclusive).  The scanner is busy until the detection instant or the
        cutoff, whichever is earlier; a second scan within that window is an
        error."""
        if detect_latency < 0:
            raise ValueError("detect_latency must be >= 0")
        if now < self._busy_until:
            raise ScanInProgressError(
                f"scan already in progress until t={self._busy_until:.3f}")
        detected = detect_latency <= QR_DETECT_TIMEOUT_S
        finished = now + min(detect_latency, QR_DETECT_TIMEOUT_S)
        self._busy_until = finished
        outbound = None
        if detected:
            outbound = Outbound.text(f"{QR_TOPIC_PREFIX}/{tag_id}", "detected", qos=1)
            log.info("event=tag_detected tag=%s latency=%.3f", tag_id, detect_latency)
        else:
            log.info("event=tag_timeout tag=%s latency=%.3f", tag_id, detect_latency)
        return ScanOutcome(tag_id=tag_id, detected=detected, started_at=now,
                           finished_at=finished, outbound=outbound)

    # ------------------------------------------------------------------ #
    # notifications

    def on_notification(self, payload: bytes, now: float) -> RenderLogEntry | None:
        """Ingest one notification payload; returns the render-log entry, or
        None for malformed payloads and duplicate redeliveries."""
        try:
            notification = Notification.from_payload(payload)
        except (ValueError, KeyError) as exc:
            log.warning("event=bad_notification payload=%r error=%s", payload, exc)
            return None
        if notification.notif_id in self._seen_notif_ids:
            log.info("event=duplicate_notification notif_id=%d",
                     notification.notif_id)
            return None
        self._seen_notif_ids.add(notification.notif_id)

        # one render at a time
        start = max(now, self._render_free_at)
        complete = start + self.costs.for_modality(notification.modality) / 1000.0
        self._render_free_at = complete
        entry = RenderLogEntry(
            notif_id=notification.notif_id,
            modality=notification.modality,
            asset_ref=notification.asset_ref,
            text=notification.text,
            receive_time=now,
            render_complete_time=complete,
            rule_id=notification.rule_id,
        )
        self.render_log.append(entry)
        return entry

    def on_notifications(self, payloads: list[bytes], now: float) -> list[RenderLogEntry]:
        """Ingest a batch that arrived together, rendering in notif_id order."""
        parsed: list[tuple[int, bytes]] = []
        for payload in payloads:
            try:
                notif_id = int(json.loads(payload.decode("utf-8"))["notif_id"])
            except (ValueError, KeyError, UnicodeDecodeError):
                notif_id = -1   # let on_notification log the rejection
            parsed.append((notif_id, payload))
        parsed.sort(key=lambda item: item[0])
        entries = []
        for _, payload in parsed:
            entry = self.on_notification(payload, now)
            if entry is not None:
                entries.append(entry)
        return entries

    def reset_render_pacing(self) -> None:
        """Forget queued render backlog; used between independent bench
        trials so each one starts with an idle renderer."""
        self._render_free_at = float("-inf")

    def confirm(self, notif_id: int, now: float) -> Outbound:
        """Answer a confirmable prompt; publishes the rule id for the engine."""
        for entry in self.render_log:
            if entry.notif_id == notif_id:
                if entry.rule_id is None:
                    raise ValueError(f"notification {notif_id} is not confirmable")
                log.info("event=confirm notif_id=%d rule=%s", notif_id, entry.rule_id)
                return Outbound(
                    topic=CONFIRM_TOPIC,
                    payload=json.dumps({"rule_id": entry.rule_id}).encode("utf-8"),
                    qos=1)
        raise KeyError(f"unknown notification id {notif_id}")

    def history(self, modality: Modality | None = None) -> list[RenderLogEntry]:
        """Render log, newest first (current state, then scroll-back)."""
        entries = [e for e in self.render_log
                   if modality is None or e.modality == modality]
        return list(reversed(entries))


class PatientAgentService:
    """Transport glue for the agent's notification subscription."""

    SUBSCRIPTIONS = [(f"{NOTIFY_TOPIC_PREFIX}/#", 1)]

    def __init__(self, agent: PatientAgent):
        self.agent = agent

    def handle_message(self, topic: str, payload: bytes, now: float) -> list[Outbound]:
        self.agent.on_notification(payload, now)
        return []
