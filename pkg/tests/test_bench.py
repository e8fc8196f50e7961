import asyncio
import csv
import statistics

import pytest

from aalhub.bench import (
    LatencySample,
    export_csv,
    loss_audit,
    nearest_rank,
    run_bench,
    run_trial,
    stats,
)
from aalhub.mqtt.server import BrokerServer
from aalhub.patient import RenderCosts


def sample(i, latency_ms, kind="audio"):
    t0 = 1_000_000_000
    return LatencySample(i, kind, t0, t0 + int(latency_ms * 1e6))


def lost(i, kind="audio"):
    return LatencySample(i, kind, 1_000_000_000, None)


# --- stats ---------------------------------------------------------------------


def test_stats_simple_triple():
    report = stats([sample(1, 100.0), sample(2, 110.0), sample(3, 120.0)])
    assert report.mean_ms == pytest.approx(110.0)
    assert report.min_ms == pytest.approx(100.0)
    assert report.max_ms == pytest.approx(120.0)
    assert report.p50_ms == pytest.approx(110.0)
    assert report.loss_count == 0


def test_stats_single_sample():
    report = stats([sample(1, 364.0)])
    assert report.mean_ms == report.min_ms == report.max_ms == pytest.approx(364.0)
    assert report.std_ms == pytest.approx(0.0)


def test_stats_ordering_invariant():
    report = stats([sample(i, v) for i, v in enumerate([5, 1, 9, 3, 7], 1)])
    assert report.min_ms <= report.p50_ms <= report.p95_ms <= report.max_ms


def test_stats_with_losses():
    report = stats([sample(1, 10.0), lost(2), sample(3, 20.0)])
    assert report.n == 3
    assert report.loss_count == 1
    assert report.mean_ms == pytest.approx(15.0)


def test_stats_loss_only():
    report = stats([lost(1)])
    assert report.loss_count == 1
    assert report.mean_ms is None


def test_nearest_rank():
    values = sorted([15.0, 20.0, 35.0, 40.0, 50.0])
    assert nearest_rank(values, 30) == 20.0
    assert nearest_rank(values, 40) == 20.0
    assert nearest_rank(values, 50) == 35.0
    assert nearest_rank(values, 100) == 50.0
    assert nearest_rank(values, 1) == 15.0


# --- csv -----------------------------------------------------------------------


def test_csv_export_and_independent_mean(tmp_path):
    samples = [sample(i, 100.0 + i * 0.125) for i in range(1, 51)]
    path = tmp_path / "out.csv"
    export_csv(samples, str(path))

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 50
    assert list(rows[0]) == ["trial", "kind", "t_publish_ns", "t_render_ns",
                             "latency_ms"]
    recomputed = statistics.fmean(float(r["latency_ms"]) for r in rows)
    report = stats(samples)
    assert abs(recomputed - report.mean_ms) <= 1e-9 * abs(report.mean_ms)


def test_csv_losses_have_empty_latency(tmp_path):
    path = tmp_path / "out.csv"
    export_csv([sample(1, 5.0), lost(2)], str(path))
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[1]["latency_ms"] == ""
    assert rows[1]["t_render_ns"] == ""


def test_loss_audit():
    assert loss_audit([1, 2, 3], [1, 2, 3]) == 0
    assert loss_audit([1, 2, 3], [1]) == 2
    assert loss_audit([], []) == 0


# --- live trials -----------------------------------------------------------------


def test_audio_trials_bounded_below_by_render_cost():
    async def main():
        server = BrokerServer(port=0)
        await server.start()
        try:
            samples = await run_trial(
                "audio", 5, ("127.0.0.1", server.port),
                RenderCosts(audio_ms=364.0, image_ms=106.0))
        finally:
            await server.stop()
        return samples
    samples = asyncio.run(main())
    assert len(samples) == 5
    assert all(not s.lost for s in samples)
    assert all(s.latency_ms >= 364.0 for s in samples)


def test_image_trials_bounded_below_by_render_cost():
    async def main():
        server = BrokerServer(port=0)
        await server.start()
        try:
            return await run_trial(
                "image", 5, ("127.0.0.1", server.port),
                RenderCosts(audio_ms=364.0, image_ms=106.0))
        finally:
            await server.stop()
    samples = asyncio.run(main())
    assert all(s.latency_ms >= 106.0 for s in samples)


def test_transport_only_latency_is_small():
    async def main():
        server = BrokerServer(port=0)
        await server.start()
        try:
            return await run_trial(
                "audio", 10, ("127.0.0.1", server.port), RenderCosts.zero())
        finally:
            await server.stop()
    samples = asyncio.run(main())
    report = stats(samples)
    assert report.loss_count == 0
    assert report.mean_ms < 50.0


def test_dead_broker_records_losses():
    async def main():
        return await run_trial("audio", 1, ("127.0.0.1", 1),
                               RenderCosts.zero(), timeout_s=2.0)
    samples = asyncio.run(main())
    assert len(samples) == 1
    assert samples[0].lost


def test_run_bench_spins_local_broker(tmp_path):
    csv_path = tmp_path / "bench.csv"
    samples, report = asyncio.run(run_bench(
        "image", 3, RenderCosts.zero(), csv_path=str(csv_path)))
    assert report.n == 3
    assert report.loss_count == 0
    assert csv_path.exists()


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        asyncio.run(run_trial("video", 1, ("127.0.0.1", 1)))
