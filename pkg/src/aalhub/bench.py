"""Response-time harness: replicated end-to-end trials through a real TCP
loop (trigger publish -> rule firing -> notification -> simulated render).

Publisher and agent run in one process around a local broker, so one
monotonic nanosecond clock covers both ends and no cross-machine skew enters
the samples.  Each trial is independent: the agent's render pacing is reset
between trials, matching replication under identical conditions.

The reference deployment's measured means (audio 364 ms, image 106 ms on
smartphone hardware) are reported as context constants only; desk-scale
numbers are not comparable to them.
"""

from __future__ import annotations

import asyncio
import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass

from .messages import Outbound
from .mqtt.client import MqttError
from .mqtt.server import BrokerServer
from .patient import PatientAgent, PatientAgentService, RenderCosts
from .rules import Modality, Rule, RuleEngine, RuleEngineService, default_rules
from .services import MqttServiceRunner, make_client

log = logging.getLogger("aalhub.bench")

REFERENCE_AUDIO_MEAN_MS = 364.0
REFERENCE_IMAGE_MEAN_MS = 106.0

DEFAULT_TRIAL_TIMEOUT_S = 10.0

CSV_HEADER = ["trial", "kind", "t_publish_ns", "t_render_ns", "latency_ms"]

#: trigger publish and awaited notification modality per trial kind
TRIAL_PATHS: dict[str, tuple[str, bytes, Modality]] = {
    "audio": ("home/bedroom/drawer_relay", b"1", Modality.AUDIO),
    "image": ("patient/qr/bedroom_door", b"detected", Modality.IMAGE3D),
}


@dataclass(frozen=True)
class LatencySample:
    trial_index: int            # 1-based
    kind: str
    t_publish_ns: int
    t_render_ns: int | None     # None marks a lost trial

    @property
    def latency_ms(self) -> float | None:
        if self.t_render_ns is None:
            return None
        return (self.t_render_ns - self.t_publish_ns) / 1e6

    @property
    def lost(self) -> bool:
        return self.t_render_ns is None


@dataclass(frozen=True)
class TrialReport:
    kind: str
    n: int
    loss_count: int
    mean_ms: float | None
    std_ms: float | None
    min_ms: float | None
    max_ms: float | None
    p50_ms: float | None
    p95_ms: float | None


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile over an ascending list."""
    if not sorted_values:
        raise ValueError("no values")
    rank = math.ceil(percentile / 100 * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


def stats(samples: list[LatencySample]) -> TrialReport:
    kind = samples[0].kind if samples else "?"
    received = sorted(s.latency_ms for s in samples if not s.lost)
    loss_count = len(samples) - len(received)
    if not received:
        return TrialReport(kind=kind, n=len(samples), loss_count=loss_count,
                           mean_ms=None, std_ms=None, min_ms=None, max_ms=None,
                           p50_ms=None, p95_ms=None)
    return TrialReport(
        kind=kind,
        n=len(samples),
        loss_count=loss_count,
        mean_ms=statistics.fmean(received),
        std_ms=statistics.pstdev(received),
        min_ms=received[0],
        max_ms=received[-1],
        p50_ms=nearest_rank(received, 50),
        p95_ms=nearest_rank(received, 95),
    )


def export_csv(samples: list[LatencySample], path: str) -> None:
    """One row per sample; losses keep their publish time and leave the
    render/latency columns empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for sample in samples:
            writer.writerow([
                sample.trial_index,
                sample.kind,
                sample.t_publish_ns,
                "" if sample.t_render_ns is None else sample.t_render_ns,
                "" if sample.latency_ms is None else repr(sample.latency_ms),
            ])


def loss_audit(sent_log: list, received_log: list) -> int:
    """Triggering events that never produced a render-log entry."""
    return max(0, len(sent_log) - len(received_log))


def format_report(report: TrialReport) -> str:
    def fmt(value: float | None) -> str:
        return "n/a" if value is None else f"{value:.3f} ms"

    lines = [
        f"response-time trial: kind={report.kind} n={report.n} "
        f"loss_count={report.loss_count}",
        f"  mean {fmt(report.mean_ms)}   std {fmt(report.std_ms)}",
        f"  min  {fmt(report.min_ms)}   max {fmt(report.max_ms)}",
        f"  p50  {fmt(report.p50_ms)}   p95 {fmt(report.p95_ms)}",
        "",
        f"reference deployment means (smartphone hardware): "
        f"audio {REFERENCE_AUDIO_MEAN_MS:.0f} ms, "
        f"image {REFERENCE_IMAGE_MEAN_MS:.0f} ms; "
        "desk-scale numbers are not comparable.",
    ]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- #


class TrialStack:
    """Rule engine, patient agent and a publisher wired to one broker."""

    def __init__(self, host: str, port: int, render_costs: RenderCosts,
                 rules: list[Rule] | None = None):
        self.host = host
        self.port = port
        self.agent = PatientAgent(render_costs)
        self._agent_service = PatientAgentService(self.agent)
        engine_service = RuleEngineService(
            RuleEngine(rules if rules is not None else default_rules()))
        self.entry_event = asyncio.Event()

        def agent_handler(topic: str, payload: bytes, now: float) -> list[Outbound]:
            before = len(self.agent.render_log)
            self._agent_service.handle_message(topic, payload, now)
            if len(self.agent.render_log) > before:
                self.entry_event.set()
            return []

        self._engine_runner = MqttServiceRunner(
            make_client("bench-engine", host, port),
            RuleEngineService.SUBSCRIPTIONS,
            engine_service.handle_message,
            tick=engine_service.tick)
        self._agent_runner = MqttServiceRunner(
            make_client("bench-patient", host, port),
            PatientAgentService.SUBSCRIPTIONS,
            agent_handler)
        self.publisher = make_client("bench-publisher", host, port)

    async def start(self) -> None:
        await self._engine_runner.start()
        await self._agent_runner.start()
        await self.publisher.connect()

    async def stop(self) -> None:
        await self._engine_runner.stop()
        await self._agent_runner.stop()
        await self.publisher.disconnect()


async def _wait_for_entry(stack: TrialStack, modality: Modality,
                          start_index: int, deadline: float):
    while True:
        stack.entry_event.clear()
        for entry in stack.agent.render_log[start_index:]:
            if entry.modality == modality:
                return entry
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        try:
            await asyncio.wait_for(stack.entry_event.wait(), remaining)
        except asyncio.TimeoutError:
            return None


async def run_trial(kind: str, n: int, broker: tuple[str, int],
                    render_costs: RenderCosts | None = None, *,
                    timeout_s: float = DEFAULT_TRIAL_TIMEOUT_S,
                    rules: list[Rule] | None = None) -> list[LatencySample]:
    """Run ``n`` serial end-to-end trials of ``kind`` (audio | image).

    Each trial publishes the path's triggering event and waits for the
    matching notification's simulated render completion.  Trials that cannot
    complete (unreachable broker, per-trial timeout) are recorded as losses.
    """
    if kind not in TRIAL_PATHS:
        raise ValueError(f"kind must be one of {sorted(TRIAL_PATHS)}")
    topic, payload, modality = TRIAL_PATHS[kind]
    costs = render_costs or RenderCosts()

    stack = TrialStack(broker[0], broker[1], costs, rules=rules)
    try:
        await stack.start()
    except (MqttError, OSError) as exc:
        log.warning("event=stack_unavailable error=%s", exc)
        t_dead = time.monotonic_ns()
        return [LatencySample(i + 1, kind, t_dead, None) for i in range(n)]

    samples: list[LatencySample] = []
    try:
        for i in range(1, n + 1):
            stack.agent.reset_render_pacing()
            watermark = len(stack.agent.render_log)
            t_publish_ns = time.monotonic_ns()
            try:
                await stack.publisher.publish(topic, payload, qos=1)
            except MqttError:
                samples.append(LatencySample(i, kind, t_publish_ns, None))
                continue
            entry = await _wait_for_entry(
                stack, modality, watermark,
                deadline=t_publish_ns / 1e9 + timeout_s)
            if entry is None:
                samples.append(LatencySample(i, kind, t_publish_ns, None))
                continue
            t_render_ns = int(round(entry.render_complete_time * 1e9))
            samples.append(LatencySample(i, kind, t_publish_ns, t_render_ns))
    finally:
        await stack.stop()
    return samples


async def run_bench(kind: str, n: int, render_costs: RenderCosts | None = None,
                    csv_path: str | None = None,
                    broker: tuple[str, int] | None = None,
                    timeout_s: float = DEFAULT_TRIAL_TIMEOUT_S,
                    ) -> tuple[list[LatencySample], TrialReport]:
    """CLI entry: spin a local broker unless one is given, run the trials,
    export the CSV, and return (samples, report)."""
    server = None
    if broker is None:
        server = BrokerServer(port=0)
        await server.start()
        broker = ("127.0.0.1", server.port)
    try:
        samples = await run_trial(kind, n, broker, render_costs,
                                  timeout_s=timeout_s)
    finally:
        if server is not None:
            await server.stop()
    if csv_path:
        export_csv(samples, csv_path)
    return samples, stats(samples)
