"""Scriptable downstream service used by the tests and the benchmark.

Any path except the reserved ``/arrivals`` and ``/reset`` is task intake.
Each delivery is logged, held for the configured latency and answered
according to the failure mode.
"""

from __future__ import annotations

import argparse
import asyncio
import enum
import json
import logging
import random
import sys
import time
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Optional

from aiohttp import web

log = logging.getLogger(__name__)


class FailureMode(enum.Enum):
    NONE = "NONE"
    FAIL_FIRST_K = "FAIL_FIRST_K"
    FAIL_RATE = "FAIL_RATE"
    ALWAYS_FAIL = "ALWAYS_FAIL"
    BLACK_HOLE = "BLACK_HOLE"


@dataclass
class ConsumerScript:
    latency_ms: float = 0.0
    failure_mode: FailureMode = FailureMode.NONE
    k: int = 0
    p: float = 0.0
    status_on_fail: int = 500

    def __post_init__(self) -> None:
        self.failure_mode = FailureMode(self.failure_mode)
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be within [0, 1]")

    @classmethod
    def from_json(cls, data: dict) -> ConsumerScript:
        return cls(
            latency_ms=data.get("latency_ms", 0.0),
            failure_mode=FailureMode(data.get("failure_mode", "NONE")),
            k=data.get("k", 0),
            p=data.get("p", 0.0),
            status_on_fail=data.get("status_on_fail", 500),
        )

    def to_json(self) -> dict:
        return {**asdict(self), "failure_mode": self.failure_mode.value}


@dataclass(frozen=True)
class Arrival:
    task_id: Optional[str]
    attempt: Optional[int]
    queue: Optional[str]
    method: str
    path: str
    t_ms: float
    concurrent: int
    status: Optional[int] = None


class MockConsumer:
    def __init__(self, script: Optional[ConsumerScript] = None, seed: Optional[int] = None):
        self.script = script or ConsumerScript()
        self.arrivals: list[Arrival] = []
        self.concurrent = 0
        self.max_concurrent = 0
        self._failures: Counter[str] = Counter()
        self._rng = random.Random(seed)
        self._runner: Optional[web.AppRunner] = None
        self.url: Optional[str] = None

    def app(self) -> web.Application:
        app = web.Application()
        app.router.add_get("/arrivals", self.get_arrivals)
        app.router.add_post("/reset", self.reset)
        app.router.add_route("*", "/{tail:.*}", self.handle_delivery)
        return app

    def _should_fail(self, task_id: str) -> bool:
        mode = self.script.failure_mode
        if mode is FailureMode.NONE:
            return False
        if mode is FailureMode.ALWAYS_FAIL:
            return True
        if mode is FailureMode.FAIL_RATE:
            return self._rng.random() < self.script.p
        # FAIL_FIRST_K counts per task id so concurrent tasks don't interfere
        self._failures[task_id] += 1
        return self._failures[task_id] <= self.script.k

    async def handle_delivery(self, request: web.Request) -> web.StreamResponse:
        self.concurrent += 1
        self.max_concurrent = max(self.max_concurrent, self.concurrent)
        try:
            task_id = request.headers.get("X-Task-Id")
            attempt = _int_or_none(request.headers.get("X-Task-Attempt"))
            arrival = Arrival(
                task_id, attempt, request.headers.get("X-Queue-Name"), request.method, request.path,
                time.monotonic() * 1000.0, self.concurrent,
            )
            await request.read()
            if task_id is None or attempt is None:
                self.arrivals.append(_with_status(arrival, 400))
                return web.Response(status=400, text="missing X-Task-Id or X-Task-Attempt")
            if self.script.failure_mode is FailureMode.BLACK_HOLE:
                self.arrivals.append(arrival)
                # held until the client gives up and the handler is cancelled
                await asyncio.Event().wait()
            status = self.script.status_on_fail if self._should_fail(task_id) else 200
            self.arrivals.append(_with_status(arrival, status))
            if self.script.latency_ms > 0:
                await asyncio.sleep(self.script.latency_ms / 1000.0)
            return web.Response(status=status)
        finally:
            self.concurrent -= 1

    async def get_arrivals(self, request: web.Request) -> web.Response:
        return web.json_response(
            {"arrivals": [asdict(a) for a in self.arrivals], "max_concurrent": self.max_concurrent}
        )

    async def reset(self, request: web.Request) -> web.Response:
        if request.can_read_body:
            body = await request.json()
            if body:
                self.script = ConsumerScript.from_json(body)
        self.arrivals = []
        self._failures.clear()
        self.max_concurrent = self.concurrent
        return web.json_response({"ok": True, "script": self.script.to_json()})

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> str:
        self._runner = web.AppRunner(self.app(), handler_cancellation=True, access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, host, port)
        await site.start()
        bound = self._runner.addresses[0]
        self.url = f"http://{bound[0]}:{bound[1]}"
        return self.url

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None


def _with_status(arrival: Arrival, status: int) -> Arrival:
    return Arrival(**{**asdict(arrival), "status": status})


def _int_or_none(value: Optional[str]) -> Optional[int]:
    try:
        return int(value) if value is not None else None
    except ValueError:
        return None


def _parse_listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: Optional[list[str]] = None) -> None:
    parser = argparse.ArgumentParser(prog="taskq-consumer", description="Mock task consumer")
    parser.add_argument("--listen", default="127.0.0.1:7421")
    parser.add_argument("--latency-ms", type=float, default=0.0)
    parser.add_argument("--failure-mode", choices=[m.value for m in FailureMode], default="NONE")
    parser.add_argument("--k", type=int, default=0)
    parser.add_argument("--p", type=float, default=0.0)
    parser.add_argument("--status-on-fail", type=int, default=500)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    script = ConsumerScript(args.latency_ms, FailureMode(args.failure_mode), args.k, args.p, args.status_on_fail)
    consumer = MockConsumer(script, seed=args.seed)

    async def serve() -> None:
        host, port = _parse_listen(args.listen)
        url = await consumer.start(host, port)
        print(json.dumps({"listening": url}), flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await consumer.stop()

    try:
        asyncio.run(serve())
    except KeyboardInterrupt:
        pass
    sys.exit(0)


if __name__ == "__main__":
    main()
