"""Worker pool: turns dispatched tasks into HTTP requests and settles them.

A fixed number of workers drain one bounded intake. Failed attempts that may
be retried are parked in a single timer schedule and go back onto the intake
when their backoff elapses, without touching the queue's token bucket.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import logging
import time
from collections.abc import Callable
from dataclasses import dataclass
from typing import Optional, Union

import aiohttp

from .model import AttemptRecord, Event, Outcome, Task, TaskState, now_ms
from .persistence import StoreError, TaskStore

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkerPoolConfig:
    worker_count: int = 16
    handoff_buffer: int = 256

    def __post_init__(self) -> None:
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.handoff_buffer < 0:
            raise ValueError("handoff_buffer must be >= 0")


@dataclass(frozen=True)
class DeliveryResult:
    outcome: Outcome
    response_status: Optional[int] = None
    latency_ms: float = 0.0

    def __post_init__(self) -> None:
        acked_status = self.response_status is not None and 200 <= self.response_status <= 299
        if (self.outcome is Outcome.ACKED) != acked_status:
            raise ValueError(f"{self.outcome.value} inconsistent with status {self.response_status}")


@dataclass(frozen=True)
class Retry:
    after: float


@dataclass(frozen=True)
class Fail:
    pass


def classify_status(status: int) -> Outcome:
    return Outcome.ACKED if 200 <= status <= 299 else Outcome.NACKED


def decide_retry(task: Task, result: DeliveryResult, now: float) -> Union[Retry, Fail]:
    """Retry after the fixed backoff while attempts remain, else fail.

    `now` and the returned deadline are monotonic seconds.
    """
    if result.outcome is Outcome.ACKED:
        raise ValueError("an acknowledged attempt is never retried")
    if task.attempts_used <= task.retry_policy.max_retries:
        return Retry(now + task.retry_policy.backoff_ms / 1000.0)
    return Fail()


def request_headers(task: Task) -> dict[str, str]:
    return {
        "X-Task-Id": str(task.id),
        "X-Task-Attempt": str(task.attempts_used),
        "X-Queue-Name": task.queue,
        "Content-Type": task.content_type or "application/octet-stream",
    }


async def execute_attempt(session: aiohttp.ClientSession, task: Task) -> DeliveryResult:
    """Send one delivery and classify what came back. Never raises."""
    timeout = aiohttp.ClientTimeout(total=task.retry_policy.ack_timeout_ms / 1000.0)
    started = time.monotonic()
    try:
        async with session.request(
            task.method,
            task.destination,
            data=task.payload or None,
            headers=request_headers(task),
            timeout=timeout,
            allow_redirects=False,
        ) as resp:
            await resp.read()
            status = resp.status
    except asyncio.TimeoutError:
        return DeliveryResult(Outcome.TIMED_OUT, None, _since(started))
    except (aiohttp.ClientError, OSError, ValueError) as exc:
        log.debug("delivery of %s failed: %r", task.id, exc)
        return DeliveryResult(Outcome.TRANSPORT_ERROR, None, _since(started))
    return DeliveryResult(classify_status(status), status, _since(started))


def _since(started: float) -> float:
    return (time.monotonic() - started) * 1000.0


class WorkerPool:
    """Runs `worker_count` workers plus the retry timer on the current loop.

    ``on_update`` is called with every new version of a task the pool
    produces, so the owner can keep its live view and counters current.
    """

    def __init__(
        self,
        store: TaskStore,
        config: WorkerPoolConfig = WorkerPoolConfig(),
        on_update: Callable[[Task], None] = lambda task: None,
    ):
        self.store = store
        self.config = config
        self.on_update = on_update
        # asyncio.Queue treats 0 as unbounded; a zero buffer becomes one slot
        # entries carry the log sequence that must be durable before sending
        self.intake: asyncio.Queue[tuple[Task, int]] = asyncio.Queue(maxsize=max(1, config.handoff_buffer))
        self.session: Optional[aiohttp.ClientSession] = None
        self.in_flight = 0
        self.max_in_flight = 0
        self._retries: list[tuple[float, int, Task]] = []
        self._retry_counter = itertools.count()
        self._retry_wake = asyncio.Event()
        self._workers: list[asyncio.Task] = []
        self._timer: Optional[asyncio.Task] = None
        self._handling: set[asyncio.Task] = set()

    async def start(self) -> None:
        if self.session is None:
            self.session = aiohttp.ClientSession(
                connector=aiohttp.TCPConnector(limit=0, force_close=False),
                auto_decompress=False,
            )
        self._workers = [
            asyncio.create_task(self._worker(i), name=f"worker-{i}") for i in range(self.config.worker_count)
        ]
        self._timer = asyncio.create_task(self._retry_timer(), name="retry-timer")

    async def submit(self, task: Task, durable_at: int = 0) -> None:
        """Hand a DISPATCHED task to the workers; waits while the intake is full.

        The worker holds the request until the store has made `durable_at`
        durable, so the dispatch write can be committed with others.
        """
        await self.intake.put((task, durable_at))

    def schedule_retry(self, task: Task, after: float) -> None:
        """Re-deliver a RETRY_WAIT task once monotonic time reaches `after`."""
        if task.state is not TaskState.RETRY_WAIT:
            raise ValueError(f"task {task.id} is {task.state.value}, not RETRY_WAIT")
        heapq.heappush(self._retries, (after, next(self._retry_counter), task))
        self._retry_wake.set()

    @property
    def pending_retries(self) -> int:
        return len(self._retries)

    async def stop(self, grace: float = 30.0) -> None:
        """Stop taking work, let attempts already on the wire settle, close."""
        for job in [*self._workers, *filter(None, [self._timer])]:
            job.cancel()
        await asyncio.gather(*self._workers, *filter(None, [self._timer]), return_exceptions=True)
        if self._handling:
            await asyncio.wait(self._handling, timeout=grace)
        if self.session is not None:
            await self.session.close()
            self.session = None

    # -- workers --------------------------------------------------------

    async def _worker(self, index: int) -> None:
        while True:
            task, durable_at = await self.intake.get()
            job = asyncio.create_task(self._handle(task, durable_at))
            self._handling.add(job)
            job.add_done_callback(self._handling.discard)
            # shutdown cancels the worker, not the attempt it is running
            try:
                await asyncio.shield(job)
            except asyncio.CancelledError:
                raise
            except Exception:
                log.exception("worker %d lost task %s while settling it", index, task.id)

    async def _handle(self, task: Task, durable_at: int = 0) -> None:
        try:
            await self.store.flushed(durable_at)
        except StoreError as exc:
            # the counted attempt may not survive a crash, so never send it
            log.error("ALARM dispatch of %s is not durable: %s", task.id, exc)
            started = now_ms()
            await self.settle(task.advance(Event.REQUEST_SENT, started), DeliveryResult(Outcome.TRANSPORT_ERROR), started)
            return
        started = now_ms()
        self.in_flight += 1
        self.max_in_flight = max(self.max_in_flight, self.in_flight)
        try:
            task = task.advance(Event.REQUEST_SENT, started)
            self.on_update(task)
            assert self.session is not None
            result = await execute_attempt(self.session, task)
        except Exception:
            log.exception("worker crashed delivering %s", task.id)
            result = DeliveryResult(Outcome.TRANSPORT_ERROR)
            if task.state is TaskState.DISPATCHED:
                task = task.advance(Event.REQUEST_SENT, started)
        finally:
            self.in_flight -= 1
        await self.settle(task, result, started)

    async def settle(self, task: Task, result: DeliveryResult, started: int) -> Task:
        """Record the attempt and move an IN_FLIGHT task to its next state."""
        ended = max(now_ms(), started)
        attempt = AttemptRecord(task.id, task.attempts_used, started, ended, result.outcome, result.response_status)
        decision: Union[Retry, Fail, None] = None
        if result.outcome is Outcome.ACKED:
            task = task.advance(Event.ACK_RECEIVED, ended)
        else:
            decision = decide_retry(task, result, time.monotonic())
            event = Event.ATTEMPT_FAILED_RETRY_ALLOWED if isinstance(decision, Retry) else Event.ATTEMPT_FAILED_RETRIES_EXHAUSTED
            task = task.advance(event, ended)
        try:
            self.store.append_attempt(attempt)
            seq = self.store.append_state(task.id, task.state, task.attempts_used, ended)
            await self.store.flushed(seq)
        except StoreError as exc:
            log.error("could not persist outcome of %s attempt %d: %s", task.id, attempt.attempt_number, exc)
        self.on_update(task)
        if isinstance(decision, Retry):
            self.schedule_retry(task, decision.after)
        return task

    # -- retry timer ----------------------------------------------------

    async def _retry_timer(self) -> None:
        while True:
            if not self._retries:
                self._retry_wake.clear()
                await self._retry_wake.wait()
                continue
            due = self._retries[0][0]
            delay = due - time.monotonic()
            if delay > 0:
                self._retry_wake.clear()
                try:
                    await asyncio.wait_for(self._retry_wake.wait(), delay)
                except asyncio.TimeoutError:
                    pass
                continue
            _, _, waiting = heapq.heappop(self._retries)
            at = now_ms()
            task = waiting.advance(Event.BACKOFF_ELAPSED, at, attempts_used=waiting.attempts_used + 1)
            try:
                seq = self.store.append_state(task.id, task.state, task.attempts_used, at)
            except StoreError as exc:
                log.error("could not persist retry dispatch of %s: %s; retrying in 1s", task.id, exc)
                heapq.heappush(self._retries, (time.monotonic() + 1.0, next(self._retry_counter), waiting))
                continue
            self.on_update(task)
            await self.intake.put((task, seq))

