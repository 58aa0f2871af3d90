"""In-process service and consumer wiring shared by the integration tests."""

from __future__ import annotations

import asyncio
import contextlib
import time
from typing import Optional

import aiohttp

from taskq.consumer import ConsumerScript, MockConsumer
from taskq.persistence import TaskStore
from taskq.service import ServiceConfig, TaskQueueService


@contextlib.asynccontextmanager
async def running_stack(
    script: Optional[ConsumerScript] = None,
    *,
    workers: int = 16,
    handoff_buffer: int = 256,
    store: Optional[TaskStore] = None,
    store_kind: str = "memory",
    store_dir: Optional[str] = None,
):
    """Yield (service, consumer, http session) all on the current loop."""
    consumer = MockConsumer(script or ConsumerScript())
    await consumer.start()
    config = ServiceConfig("127.0.0.1:0", store_kind, store_dir, True, workers, handoff_buffer)
    service = TaskQueueService(config, store=store)
    await service.start()
    session = aiohttp.ClientSession()
    try:
        yield service, consumer, session
    finally:
        await session.close()
        await service.stop()
        await consumer.stop()


async def create_queue(session, url: str, name: str, capacity: int = 1000, interval: int = 1) -> dict:
    async with session.post(
        f"{url}/v1/queues", json={"name": name, "capacity": capacity, "refill_interval_ms": interval}
    ) as resp:
        assert resp.status == 201, await resp.text()
        return await resp.json()


async def submit(session, url: str, queue: str, destination: str, **fields) -> str:
    body = {"destination": destination, "method": "POST", **fields}
    async with session.post(f"{url}/v1/queues/{queue}/tasks", json=body) as resp:
        assert resp.status == 202, await resp.text()
        return (await resp.json())["task_id"]


async def task_view(session, url: str, task_id: str) -> dict:
    async with session.get(f"{url}/v1/tasks/{task_id}") as resp:
        assert resp.status == 200, await resp.text()
        return await resp.json()


async def wait_terminal(session, url: str, task_ids, timeout: float = 30.0) -> dict[str, dict]:
    """Poll until every task is FINISHED or FAILED; returns the final views."""
    deadline = time.monotonic() + timeout
    remaining = list(task_ids)
    done: dict[str, dict] = {}
    while remaining:
        still = []
        for tid in remaining:
            view = await task_view(session, url, tid)
            if view["state"] in ("FINISHED", "FAILED"):
                done[tid] = view
            else:
                still.append(tid)
        remaining = still
        if remaining:
            if time.monotonic() > deadline:
                raise AssertionError(f"{len(remaining)} task(s) not terminal after {timeout}s")
            await asyncio.sleep(0.02)
    return done
