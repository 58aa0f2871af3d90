"""Benchmark driver.

Starts a fresh service and mock consumer as child processes for every
repetition, creates the configured queues, submits every task, then polls
queue stats until all of them are terminal. Wall time runs from the moment
submission completes to the poll that observes the last terminal task.

Arrival timestamps from the consumer and the harness's own timestamps both
come from CLOCK_MONOTONIC, so latencies are only meaningful on one host.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import itertools
import json
import logging
import os
import shutil
import signal
import statistics
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional

import aiohttp

from .consumer import ConsumerScript

log = logging.getLogger(__name__)

POLL_INTERVAL_S = 0.025


class BenchError(Exception):
    def __init__(self, message: str, progress: Optional[dict] = None):
        super().__init__(message)
        self.progress = progress or {}


@dataclass
class QueueSpec:
    name: str
    capacity: int
    refill_interval_ms: int
    task_count: int


@dataclass
class BenchConfig:
    queues: list[QueueSpec]
    workers: int = 16
    store: str = "MEMORY"
    fsync: bool = True
    consumer: ConsumerScript = field(default_factory=ConsumerScript)
    repetitions: int = 1
    handoff_buffer: int = 256
    max_retries: int = 3
    backoff_ms: int = 1000
    ack_timeout_ms: int = 5000
    submitters: int = 4
    deadline_s: float = 300.0
    warmup: bool = True

    def __post_init__(self) -> None:
        self.store = self.store.upper()
        if self.store not in ("MEMORY", "FILE"):
            raise ValueError(f"store must be MEMORY or FILE, got {self.store!r}")
        if not self.queues or sum(q.task_count for q in self.queues) < 1:
            raise ValueError("at least one task is required")
        names = [q.name for q in self.queues]
        if len(set(names)) != len(names):
            raise ValueError("queue names must be unique")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    @property
    def total_tasks(self) -> int:
        return sum(q.task_count for q in self.queues)

    @classmethod
    def from_json(cls, data: dict) -> BenchConfig:
        data = dict(data)
        queues = [QueueSpec(**q) for q in data.pop("queues")]
        consumer = ConsumerScript.from_json(data.pop("consumer", {}))
        task = data.pop("task", {})
        return cls(queues=queues, consumer=consumer, **task, **data)

    def to_json(self) -> dict:
        out = asdict(self)
        out["consumer"] = self.consumer.to_json()
        return out


# -- child processes ------------------------------------------------------


class Child:
    """A service or consumer subprocess that announced its URL on stdout."""

    def __init__(self, proc: asyncio.subprocess.Process, url: str):
        self.proc = proc
        self.url = url

    async def terminate(self, timeout: float = 30.0) -> None:
        if self.proc.returncode is not None:
            return
        self.proc.send_signal(signal.SIGTERM)
        try:
            await asyncio.wait_for(self.proc.wait(), timeout)
        except asyncio.TimeoutError:
            self.proc.kill()
            await self.proc.wait()

    async def kill(self) -> None:
        """SIGKILL: no shutdown path runs."""
        if self.proc.returncode is None:
            self.proc.kill()
        await self.proc.wait()


async def _spawn(module: str, args: list[str], stderr_path: Optional[str] = None, ready_timeout: float = 30.0) -> Child:
    stderr = open(stderr_path, "ab") if stderr_path else asyncio.subprocess.DEVNULL
    try:
        proc = await asyncio.create_subprocess_exec(
            sys.executable, "-m", module, *args, stdout=asyncio.subprocess.PIPE, stderr=stderr
        )
    finally:
        if stderr_path:
            stderr.close()
    try:
        line = await asyncio.wait_for(proc.stdout.readline(), ready_timeout)
        url = json.loads(line)["listening"]
    except (asyncio.TimeoutError, ValueError, KeyError) as exc:
        if proc.returncode is None:
            proc.kill()
        await proc.wait()
        raise BenchError(f"{module} did not start: {exc!r}") from exc
    return Child(proc, url)


async def launch_service(
    store: str = "memory",
    store_dir: Optional[str] = None,
    fsync: bool = True,
    workers: int = 16,
    handoff_buffer: int = 256,
    stderr_path: Optional[str] = None,
) -> Child:
    args = ["--listen", "127.0.0.1:0", "--store", store.lower(), "--fsync", str(fsync).lower()]
    args += ["--workers", str(workers), "--handoff-buffer", str(handoff_buffer)]
    if store_dir:
        args += ["--store-dir", store_dir]
    return await _spawn("taskq.service", args, stderr_path)


async def launch_consumer(script: ConsumerScript, seed: Optional[int] = None, stderr_path: Optional[str] = None) -> Child:
    args = [
        "--listen", "127.0.0.1:0",
        "--latency-ms", str(script.latency_ms),
        "--failure-mode", script.failure_mode.value,
        "--k", str(script.k),
        "--p", str(script.p),
        "--status-on-fail", str(script.status_on_fail),
    ]
    if seed is not None:
        args += ["--seed", str(seed)]
    return await _spawn("taskq.consumer", args, stderr_path)


# -- measurement ----------------------------------------------------------


def percentile(values: list[float], q: float) -> Optional[float]:
    if not values:
        return None
    ordered = sorted(values)
    rank = max(0, min(len(ordered) - 1, int(round(q / 100.0 * (len(ordered) - 1)))))
    return ordered[rank]


def first_attempt_rates(arrivals: list[dict], queues: list[QueueSpec]) -> dict[str, dict]:
    """Per-queue first-attempt counts and rates from the consumer log.

    ``steady_rate_per_s`` discounts the initial burst of ``capacity`` tokens,
    which is what the refill interval alone controls.
    """
    out = {}
    for spec in queues:
        times = sorted(a["t_ms"] for a in arrivals if a["queue"] == spec.name and a["attempt"] == 1)
        span_s = (times[-1] - times[0]) / 1000.0 if len(times) > 1 else 0.0
        rate = (len(times) / span_s) if span_s > 0 else None
        steady = ((len(times) - spec.capacity) / span_s) if span_s > 0 and len(times) > spec.capacity else None
        out[spec.name] = {"first_attempts": len(times), "first_attempt_rate_per_s": rate, "steady_rate_per_s": steady}
    return out


async def _submit_all(
    session: aiohttp.ClientSession, base: str, jobs: list[tuple[str, dict]], submitters: int
) -> tuple[dict[str, float], int]:
    """Submit every job; returns task_id -> monotonic ack time, and reject count."""
    accepted: dict[str, float] = {}
    rejected = 0
    feed = iter(jobs)

    async def submitter() -> None:
        nonlocal rejected
        for queue, body in feed:
            async with session.post(f"{base}/v1/queues/{queue}/tasks", json=body) as resp:
                data = await resp.json()
                if resp.status == 202:
                    accepted[data["task_id"]] = time.monotonic()
                else:
                    rejected += 1
                    log.warning("submission rejected: %s %s", resp.status, data)

    await asyncio.gather(*(submitter() for _ in range(max(1, submitters))))
    return accepted, rejected


async def _stats(session: aiohttp.ClientSession, base: str, queues: list[QueueSpec]) -> list[dict]:
    out = []
    for spec in queues:
        async with session.get(f"{base}/v1/queues/{spec.name}/stats") as resp:
            out.append(await resp.json())
    return out


WARMUP_QUEUE = "bench-warmup"


async def _warm_up(session: aiohttp.ClientSession, base: str, consumer: str, workers: int) -> None:
    """Open one delivery connection per worker before anything is measured.

    Without this the first burst pays for TCP setup and the earliest arrivals
    are skewed late relative to everything after them. The consumer log is
    cleared afterwards so none of this shows up in the report.
    """
    body = {"name": WARMUP_QUEUE, "capacity": workers, "refill_interval_ms": 1}
    async with session.post(f"{base}/v1/queues", json=body) as resp:
        if resp.status != 201:
            raise BenchError(f"creating warm-up queue: {resp.status} {await resp.text()}")
    task = {"destination": f"{consumer}/{WARMUP_QUEUE}", "method": "POST", "max_retries": 0, "ack_timeout_ms": 1000}

    async def one() -> str:
        async with session.post(f"{base}/v1/queues/{WARMUP_QUEUE}/tasks", json=task) as resp:
            return (await resp.json())["task_id"]

    pending = set(await asyncio.gather(*(one() for _ in range(workers))))
    while pending:
        for tid in list(pending):
            async with session.get(f"{base}/v1/tasks/{tid}") as resp:
                if (await resp.json())["state"] in ("FINISHED", "FAILED"):
                    pending.discard(tid)
        await asyncio.sleep(POLL_INTERVAL_S)
    async with session.post(f"{consumer}/reset") as resp:
        resp.raise_for_status()


async def run_once(config: BenchConfig, workdir: str) -> dict:
    store_dir = os.path.join(workdir, "store")
    os.makedirs(store_dir, exist_ok=True)
    consumer = await launch_consumer(config.consumer, stderr_path=os.path.join(workdir, "consumer.log"))
    service = None
    try:
        service = await launch_service(
            config.store, store_dir if config.store == "FILE" else None, config.fsync,
            config.workers, config.handoff_buffer, os.path.join(workdir, "service.log"),
        )
        async with aiohttp.ClientSession() as session:
            if config.warmup:
                await _warm_up(session, service.url, consumer.url, config.workers)
            for spec in config.queues:
                body = {"name": spec.name, "capacity": spec.capacity, "refill_interval_ms": spec.refill_interval_ms}
                async with session.post(f"{service.url}/v1/queues", json=body) as resp:
                    if resp.status != 201:
                        raise BenchError(f"creating queue {spec.name}: {resp.status} {await resp.text()}")

            per_queue = [
                [
                    (spec.name, {
                        "name": f"{spec.name}-{i}",
                        "destination": f"{consumer.url}/{spec.name}/{i}",
                        "method": "POST",
                        "max_retries": config.max_retries,
                        "backoff_ms": config.backoff_ms,
                        "ack_timeout_ms": config.ack_timeout_ms,
                    })
                    for i in range(spec.task_count)
                ]
                for spec in config.queues
            ]
            jobs = [job for group in itertools.zip_longest(*per_queue) for job in group if job is not None]

            t_start = time.monotonic()
            accepted, rejected = await _submit_all(session, service.url, jobs, config.submitters)
            t_submitted = time.monotonic()

            deadline = t_submitted + config.deadline_s
            while True:
                stats = await _stats(session, service.url, config.queues)
                done = sum(s["finished_total"] + s["failed_total"] for s in stats)
                if done >= len(accepted):
                    t_done = time.monotonic()
                    break
                if time.monotonic() > deadline:
                    raise BenchError(
                        f"only {done} of {len(accepted)} tasks terminal after {config.deadline_s}s",
                        {"done": done, "accepted": len(accepted), "stats": stats},
                    )
                await asyncio.sleep(POLL_INTERVAL_S)

            async with session.get(f"{consumer.url}/arrivals") as resp:
                log_body = await resp.json()
    finally:
        if service is not None:
            await service.terminate()
        await consumer.terminate()

    arrivals = log_body["arrivals"]
    last_seen: dict[str, float] = {}
    for a in arrivals:
        last_seen[a["task_id"]] = max(last_seen.get(a["task_id"], 0.0), a["t_ms"])
    latencies = [
        last_seen[tid] + config.consumer.latency_ms - acked * 1000.0 for tid, acked in accepted.items() if tid in last_seen
    ]
    return {
        "wall_time_ms": (t_done - t_submitted) * 1000.0,
        "submit_time_ms": (t_submitted - t_start) * 1000.0,
        "total_time_ms": (t_done - t_start) * 1000.0,
        "accepted": len(accepted),
        "rejected": rejected,
        "finished": sum(s["finished_total"] for s in stats),
        "failed": sum(s["failed_total"] for s in stats),
        "attempts_total": len(arrivals),
        "max_concurrent": log_body["max_concurrent"],
        "queues": first_attempt_rates(arrivals, config.queues),
        "latency_ms": {"median": percentile(latencies, 50), "p95": percentile(latencies, 95)},
        "arrivals": arrivals,
    }


def _summary(values: list[float]) -> dict:
    return {"min": min(values), "median": statistics.median(values), "max": max(values)}


async def run_bench(config: BenchConfig, keep_arrivals: bool = False) -> dict:
    runs = []
    for rep in range(config.repetitions):
        workdir = tempfile.mkdtemp(prefix=f"taskq-bench-{rep}-")
        try:
            run = await run_once(config, workdir)
        finally:
            shutil.rmtree(workdir, ignore_errors=True)
        if not keep_arrivals:
            run.pop("arrivals")
        runs.append(run)
    walls = [r["wall_time_ms"] for r in runs]
    totals = [r["total_time_ms"] for r in runs]
    return {
        "config": config.to_json(),
        "runs": runs,
        "wall_time_ms": walls,
        "wall_time_summary": _summary(walls),
        "total_time_summary": _summary(totals),
    }


STORE_VARIANTS = (("MEMORY", "MEMORY", True), ("FILE+fsync", "FILE", True), ("FILE-fsync", "FILE", False))


async def compare_stores(base: BenchConfig) -> dict:
    rows = []
    reports = {}
    for label, store, fsync in STORE_VARIANTS:
        report = await run_bench(replace(base, store=store, fsync=fsync))
        reports[label] = report
        rows.append({
            "store": label,
            "wall_time_median_ms": report["wall_time_summary"]["median"],
            "total_time_median_ms": report["total_time_summary"]["median"],
        })
    mem = rows[0]
    for row in rows:
        row["wall_ratio_vs_memory"] = row["wall_time_median_ms"] / mem["wall_time_median_ms"]
        row["total_ratio_vs_memory"] = row["total_time_median_ms"] / mem["total_time_median_ms"]
    return {"config": base.to_json(), "table": rows, "reports": reports}


def _write_csv(path: str, rows: list[dict[str, Any]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def main(argv: Optional[list[str]] = None) -> None:
    parser = argparse.ArgumentParser(prog="bench", description="Task queue throughput benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "compare-stores"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="BenchConfig JSON file")
        p.add_argument("--csv", help="also write a CSV summary here")
        p.add_argument("--deadline-s", type=float, help="give up after this long per repetition")
        p.add_argument("--submitters", type=int, help="parallel submission connections")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    with open(args.config) as fh:
        config = BenchConfig.from_json(json.load(fh))
    if args.deadline_s is not None:
        config.deadline_s = args.deadline_s
    if args.submitters is not None:
        config.submitters = args.submitters

    try:
        if args.command == "run":
            report = asyncio.run(run_bench(config))
            rows = [{k: v for k, v in r.items() if not isinstance(v, dict)} for r in report["runs"]]
        else:
            report = asyncio.run(compare_stores(config))
            rows = report["table"]
    except BenchError as exc:
        print(json.dumps({"error": str(exc), "progress": exc.progress}, indent=2))
        sys.exit(2)
    print(json.dumps(report, indent=2))
    if args.csv:
        _write_csv(args.csv, rows)


if __name__ == "__main__":
    main()
