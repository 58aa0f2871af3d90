"""TaskQueueManager: named queues, FIFO pending lists and the token gate.

Each queue runs its own dispatch loop. A loop pops the head of its pending
list only when the bucket grants a token, writes the DISPATCHED state and
hands the task to the worker pool, which sends it once that write is
durable. Retries never come back through here.
"""

from __future__ import annotations

import asyncio
import logging
import time
import uuid
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .bucket import TokenBucket
from .model import AttemptRecord, Event, Outcome, QueueConfig, Task, TaskId, TaskState, ValidationError, now_ms
from .persistence import CorruptLog, StoreError, TaskStore
from .workers import DeliveryResult, Fail, Retry, WorkerPool, decide_retry

log = logging.getLogger(__name__)

PARK_RETRY_S = 1.0
# a paced dispatch wakes this long after its token exists, so a little jitter
# on the send path cannot bring two deliveries closer than the bucket allows;
# the grant is still stamped at the due instant, so the rate is unchanged
DISPATCH_GUARD_MS = 2


def monotonic_ms() -> int:
    # rounded up, so a grant is never stamped earlier than it really happened
    return -(-time.monotonic_ns() // 1_000_000)


async def _sleep_until_ms(until: int) -> None:
    """Sleep until the monotonic clock has really reached ``until``."""
    while (remaining := until * 1_000_000 - time.monotonic_ns()) > 0:
        await asyncio.sleep(remaining / 1e9)


class QueueError(Exception):
    code = "queue_error"


class DuplicateName(QueueError):
    code = "duplicate_name"


class UnknownQueue(QueueError):
    code = "unknown_queue"


class InvalidConfig(QueueError):
    code = "validation_failed"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class QueueState:
    config: QueueConfig
    bucket: TokenBucket
    pending: deque[Task] = field(default_factory=deque)
    accepted_total: int = 0
    dispatched_total: int = 0
    finished_total: int = 0
    failed_total: int = 0
    parked: bool = False
    wake: asyncio.Event = field(default_factory=asyncio.Event)

    @property
    def depth(self) -> int:
        return len(self.pending)


@dataclass(frozen=True)
class Dispatch:
    task: Task


@dataclass(frozen=True)
class Wait:
    until: int


class _Idle:
    def __repr__(self) -> str:
        return "Idle"


Idle = _Idle()
DispatchDecision = Union[Dispatch, Wait, _Idle]


def dispatch_step(queue: QueueState, now: int, at: Optional[int] = None) -> DispatchDecision:
    """One turn of a queue's dispatch loop.

    `now` is monotonic milliseconds for the bucket, `at` the wall-clock
    stamp for the task. On Dispatch the head task has been popped, one token
    spent, and the task moved to DISPATCHED with its attempt counted.
    """
    if not queue.pending:
        return Idle
    granted, queue.bucket = queue.bucket.try_acquire(now)
    if not granted:
        return Wait(queue.bucket.next_available(now))
    task = queue.pending.popleft()
    task = task.advance(Event.TOKEN_GRANTED, now_ms() if at is None else at, attempts_used=task.attempts_used + 1)
    queue.dispatched_total += 1
    return Dispatch(task)


class TaskQueueManager:
    def __init__(self, store: TaskStore, pool: WorkerPool):
        self.store = store
        self.pool = pool
        self.queues: dict[str, QueueState] = {}
        self.tasks: dict[TaskId, Task] = {}
        self.annotations: dict[TaskId, str] = {}
        self._loops: dict[str, asyncio.Task] = {}
        pool.on_update = self._task_updated

    # -- queues ---------------------------------------------------------

    async def create_queue(self, name: str, capacity: int, refill_interval_ms: int) -> QueueConfig:
        if isinstance(name, str) and name in self.queues:
            raise DuplicateName(f"queue {name!r} already exists")
        try:
            config = QueueConfig(uuid.uuid4(), name, capacity, refill_interval_ms, now_ms())
        except ValidationError as exc:
            raise InvalidConfig(exc.field, exc.message) from exc
        seq = self.store.append_queue(config)
        await self.store.flushed(seq)
        self._register(config)
        return config

    def load_queues(self) -> None:
        """Re-create the queues a durable store remembers."""
        for config in self.store.queues():
            if config.name not in self.queues:
                self._register(config)

    def _register(self, config: QueueConfig) -> None:
        state = QueueState(config, TokenBucket.full(config.capacity, config.refill_interval_ms, monotonic_ms()))
        self.queues[config.name] = state
        self._loops[config.name] = asyncio.create_task(self._dispatch_loop(state), name=f"dispatch-{config.name}")

    def queue(self, name: str) -> QueueState:
        try:
            return self.queues[name]
        except KeyError:
            raise UnknownQueue(f"no queue named {name!r}") from None

    def queue_stats(self, name: str) -> dict:
        q = self.queue(name)
        tokens = q.bucket.refill(max(monotonic_ms(), q.bucket.last_refill)).tokens
        return {
            "queue": name,
            "depth": q.depth,
            "tokens": tokens,
            "accepted_total": q.accepted_total,
            "dispatched_total": q.dispatched_total,
            "finished_total": q.finished_total,
            "failed_total": q.failed_total,
            "in_progress": q.accepted_total - q.finished_total - q.failed_total,
            "parked": q.parked,
        }

    # -- tasks ----------------------------------------------------------

    async def submit(self, task: Task) -> Task:
        """Persist a freshly validated task, then enqueue it.

        Raises UnknownQueue before anything is written, and StoreError if
        the task could not be made durable (the caller must not accept it).
        """
        self.queue(task.queue)
        self.store.append_task(task)
        return await self.enqueue(task.queue, task)

    async def enqueue(self, queue_name: str, task: Task) -> Task:
        q = self.queue(queue_name)
        task = task.advance(Event.ENQUEUED_TO_BUCKET_GATE, now_ms())
        seq = self.store.append_state(task.id, task.state, task.attempts_used, task.updated_at)
        await self.store.flushed(seq)
        self.tasks[task.id] = task
        q.pending.append(task)
        q.accepted_total += 1
        q.wake.set()
        return task

    def get_task(self, task_id: TaskId) -> Optional[Task]:
        return self.tasks.get(task_id) or self.store.get_task(task_id)

    def _task_updated(self, task: Task) -> None:
        self.tasks[task.id] = task
        q = self.queues.get(task.queue)
        if q is None:
            return
        if task.state is TaskState.FINISHED:
            q.finished_total += 1
        elif task.state is TaskState.FAILED:
            q.failed_total += 1

    # -- dispatch -------------------------------------------------------

    async def _dispatch_loop(self, q: QueueState) -> None:
        due: Optional[int] = None
        while True:
            # a paced grant is accounted at the instant its token fell due,
            # however late the loop actually woke
            decision = dispatch_step(q, monotonic_ms() if due is None else due)
            due = None
            if decision is Idle:
                q.wake.clear()
                await q.wake.wait()
                continue
            if isinstance(decision, Wait):
                # the head of the queue cannot move before the token exists,
                # so new arrivals need not interrupt this sleep
                await _sleep_until_ms(decision.until + DISPATCH_GUARD_MS)
                due = decision.until
                continue
            task = decision.task
            try:
                seq = self.store.append_state(task.id, task.state, task.attempts_used, task.updated_at)
            except StoreError as exc:
                log.error("ALARM queue %r parked: cannot persist dispatch of %s: %s", q.config.name, task.id, exc)
                q.pending.appendleft(self.tasks[task.id])
                q.dispatched_total -= 1
                q.parked = True
                await asyncio.sleep(PARK_RETRY_S)
                continue
            q.parked = False
            self.tasks[task.id] = task
            await self.pool.submit(task, seq)

    # -- recovery -------------------------------------------------------

    async def recover(self, tasks: Optional[list[Task]] = None) -> int:
        """Resume the non-terminal tasks a store handed back after a restart.

        Tasks waiting for a token rejoin their queue in original order. An
        attempt that was on the wire when the process died counts as used:
        the task goes to RETRY_WAIT if attempts remain, FAILED otherwise.
        RETRY_WAIT tasks are retried straight away.
        """
        if tasks is None:
            try:
                tasks = self.store.load_recoverable()
            except CorruptLog as exc:
                log.warning("recovering from damaged log: %s (%d record(s) dropped)", exc, exc.dropped_records)
                tasks = exc.recovered
        for task in tasks:
            q = self.queues.get(task.queue)
            if q is None:
                self._fail_unroutable(task)
                continue
            q.accepted_total += 1
            at = now_ms()
            if task.state is TaskState.QUEUED:
                task = task.advance(Event.ENQUEUED_TO_BUCKET_GATE, at)
                self.store.append_state(task.id, task.state, task.attempts_used, at)
            if task.state is TaskState.AWAITING_TOKEN:
                self.tasks[task.id] = task
                q.pending.append(task)
                q.wake.set()
                continue
            if task.state in (TaskState.DISPATCHED, TaskState.IN_FLIGHT):
                task = self._settle_interrupted(task, at)
                if task.state is TaskState.FAILED:
                    continue
            self.tasks[task.id] = task
            self.pool.schedule_retry(task, time.monotonic())
        await self.store.flushed(self.store.last_sequence)
        return len(tasks)

    def _settle_interrupted(self, task: Task, at: int) -> Task:
        recorded = len(self.store.history(task.id))
        for number in range(recorded + 1, task.attempts_used + 1):
            self.store.append_attempt(
                AttemptRecord(task.id, number, min(task.updated_at, at), at, Outcome.TRANSPORT_ERROR)
            )
        if task.state is TaskState.DISPATCHED:
            task = task.advance(Event.REQUEST_SENT, at)
        decision = decide_retry(task, DeliveryResult(Outcome.TRANSPORT_ERROR), time.monotonic())
        if isinstance(decision, Retry):
            task = task.advance(Event.ATTEMPT_FAILED_RETRY_ALLOWED, at)
        else:
            assert isinstance(decision, Fail)
            task = task.advance(Event.ATTEMPT_FAILED_RETRIES_EXHAUSTED, at)
        self.store.append_state(task.id, task.state, task.attempts_used, at)
        self._task_updated(task)
        return task

    def _fail_unroutable(self, task: Task) -> None:
        # no edge leads here from a waiting state; this is an operator override
        at = now_ms()
        self.store.append_state(task.id, TaskState.FAILED, task.attempts_used, at)
        failed = replace(task, state=TaskState.FAILED, updated_at=at)
        self.tasks[task.id] = failed
        self.annotations[task.id] = f"queue {task.queue!r} does not exist at recovery"
        log.warning("task %s failed at recovery: queue %r is gone", task.id, task.queue)

    # -- lifecycle ------------------------------------------------------

    async def stop(self) -> None:
        for loop in self._loops.values():
            loop.cancel()
        await asyncio.gather(*self._loops.values(), return_exceptions=True)
        self._loops.clear()


