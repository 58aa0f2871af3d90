import asyncio
import csv
import json
import subprocess
import sys

import pytest

from taskq.consumer import ConsumerScript, FailureMode
from taskq.harness import BenchConfig, BenchError, QueueSpec, first_attempt_rates, percentile, run_bench


def test_percentile():
    assert percentile([], 50) is None
    assert percentile([3.0], 95) == 3.0
    values = list(range(1, 101))
    assert percentile(values, 50) in (50, 51)
    assert percentile(values, 95) in (95, 96)
    assert percentile(values, 100) == 100


def test_first_attempt_rates():
    queues = [QueueSpec("a", 2, 100, 5)]
    arrivals = [{"queue": "a", "attempt": 1, "t_ms": t} for t in (0, 0, 100, 200, 300)]
    arrivals.append({"queue": "a", "attempt": 2, "t_ms": 5000})
    rates = first_attempt_rates(arrivals, queues)["a"]
    assert rates["first_attempts"] == 5
    assert rates["first_attempt_rate_per_s"] == pytest.approx(5 / 0.3)
    assert rates["steady_rate_per_s"] == pytest.approx(3 / 0.3)


def test_config_from_json_and_validation():
    cfg = BenchConfig.from_json({
        "queues": [{"name": "q", "capacity": 5, "refill_interval_ms": 10, "task_count": 7}],
        "store": "file",
        "consumer": {"latency_ms": 3, "failure_mode": "FAIL_RATE", "p": 0.25},
        "task": {"max_retries": 1, "backoff_ms": 5},
        "repetitions": 2,
    })
    assert cfg.store == "FILE" and cfg.total_tasks == 7 and cfg.repetitions == 2
    assert cfg.consumer == ConsumerScript(3, FailureMode.FAIL_RATE, p=0.25)
    assert (cfg.max_retries, cfg.backoff_ms, cfg.submitters) == (1, 5, 4)
    assert BenchConfig.from_json(json.loads(json.dumps(cfg.to_json()))).queues == cfg.queues
    q = [QueueSpec("q", 1, 1, 1)]
    with pytest.raises(ValueError):
        BenchConfig(q, store="DISK")
    with pytest.raises(ValueError):
        BenchConfig([QueueSpec("q", 1, 1, 0)])
    with pytest.raises(ValueError):
        BenchConfig(q + q)
    with pytest.raises(ValueError):
        BenchConfig(q, repetitions=0)


def test_shipped_configs_parse():
    import pathlib

    for path in sorted(pathlib.Path(__file__).parent.parent.joinpath("configs").glob("*.json")):
        BenchConfig.from_json(json.loads(path.read_text()))


def test_conservation_and_repetitions():
    cfg = BenchConfig(
        [QueueSpec("q", 50, 1, 40)], workers=4, repetitions=2, max_retries=1, backoff_ms=10,
        consumer=ConsumerScript(failure_mode=FailureMode.FAIL_RATE, p=0.4),
    )
    report = asyncio.run(run_bench(cfg))
    assert len(report["wall_time_ms"]) == 2
    for run in report["runs"]:
        assert run["accepted"] == 40 and run["rejected"] == 0
        assert run["finished"] + run["failed"] == run["accepted"]
        assert run["wall_time_ms"] > 0
        assert run["max_concurrent"] <= 4
    summary = report["wall_time_summary"]
    assert summary["min"] <= summary["median"] <= summary["max"]


def test_deadline_reports_progress():
    cfg = BenchConfig([QueueSpec("q", 1, 60_000, 3)], deadline_s=0.3)
    with pytest.raises(BenchError) as err:
        asyncio.run(run_bench(cfg))
    assert err.value.progress["accepted"] == 3
    assert err.value.progress["done"] < 3


@pytest.mark.slow
def test_worker_limited_closed_form():
    # one worker serializes 100 deliveries of 50 ms each: 5.0 s
    cfg = BenchConfig([QueueSpec("q", 1000, 1, 100)], workers=1, consumer=ConsumerScript(latency_ms=50))
    report = asyncio.run(run_bench(cfg))
    run = report["runs"][0]
    assert 4500 <= run["wall_time_ms"] <= 5500, run["wall_time_ms"]
    assert run["finished"] == 100 and run["max_concurrent"] == 1


@pytest.mark.slow
def test_monotone_scaling_in_workers():
    walls = []
    for workers in (1, 4, 16):
        cfg = BenchConfig([QueueSpec("q", 10_000, 1, 64)], workers=workers, consumer=ConsumerScript(latency_ms=20))
        walls.append(asyncio.run(run_bench(cfg))["runs"][0]["wall_time_ms"])
    assert walls[0] >= walls[1] >= walls[2], walls


def test_cli_writes_json_and_csv(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"queues": [{"name": "q", "capacity": 10, "refill_interval_ms": 1, "task_count": 5}],
                                  "workers": 2}))
    out_csv = tmp_path / "out.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "taskq.harness", "run", "--config", str(config), "--csv", str(out_csv)],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    report = json.loads(proc.stdout)
    # the warm-up deliveries are not part of the report
    assert report["runs"][0]["finished"] == report["runs"][0]["attempts_total"] == 5
    rows = list(csv.DictReader(out_csv.open()))
    assert len(rows) == 1 and float(rows[0]["wall_time_ms"]) > 0
