from __future__ import annotations

import threading
from dataclasses import replace
from typing import Optional

from ..model import AttemptRecord, QueueConfig, Task, TaskId, TaskState, now_ms
from .codec import Body, Checkpoint, RecordKind, StateChange, StoreRecord, kind_of


class StoreError(Exception):
    code = "store_error"


class StoreIOError(StoreError):
    code = "io"


class NotFound(StoreError):
    code = "not_found"


class OutOfOrder(StoreError):
    code = "out_of_order"


class CorruptLog(StoreError):
    """The log has a damaged tail.

    Everything before the first bad frame was replayed; ``recovered`` holds
    what load_recoverable would have returned from that prefix.
    """

    code = "corrupt"

    def __init__(self, message: str, recovered: list[Task], dropped_records: int, dropped_bytes: int):
        super().__init__(message)
        self.recovered = recovered
        self.dropped_records = dropped_records
        self.dropped_bytes = dropped_bytes


class TaskIndex:
    """Fold of store records into the latest view of every task and queue."""

    def __init__(self) -> None:
        self.tasks: dict[TaskId, Task] = {}
        self.order: dict[TaskId, int] = {}
        self.attempts: dict[TaskId, list[AttemptRecord]] = {}
        self.queues: dict[str, QueueConfig] = {}

    def apply(self, record: StoreRecord) -> None:
        body = record.body
        if record.kind is RecordKind.TASK_UPSERT:
            self.tasks[body.id] = body
            self.order.setdefault(body.id, record.sequence)
            self.attempts.setdefault(body.id, [])
        elif record.kind is RecordKind.STATE_CHANGE:
            task = self.tasks.get(body.task_id)
            if task is not None:
                self.tasks[body.task_id] = replace(
                    task, state=body.state, attempts_used=body.attempts_used, updated_at=body.at
                )
        elif record.kind is RecordKind.ATTEMPT:
            self.attempts.setdefault(body.task_id, []).append(body)
        elif record.kind is RecordKind.QUEUE_CREATE:
            self.queues[body.name] = body

    def recoverable(self) -> list[Task]:
        live = [t for t in self.tasks.values() if not t.state.terminal]
        live.sort(key=lambda t: self.order[t.id])
        return live

    def snapshot(self) -> dict:
        """Plain comparable form, used to check replay equivalence."""
        return {
            "tasks": dict(self.tasks),
            "attempts": {k: list(v) for k, v in self.attempts.items()},
            "queues": dict(self.queues),
            "recoverable": [t.id for t in self.recoverable()],
        }

    def reconstruction(self) -> list[Body]:
        """Minimal bodies that rebuild every queue and every live task."""
        bodies: list[Body] = list(self.queues.values())
        for task in self.recoverable():
            bodies.append(task)
            bodies.extend(self.attempts.get(task.id, []))
        return bodies


class TaskStore:
    """Storage contract shared by every backend.

    The public write methods return only once the record is as durable as
    the backend can make it. The ``append_*`` variants write without
    waiting, returning the sequence number to pass to ``wait_durable`` or
    ``flushed``; the service uses them to overlap log syncs with other work.
    All methods are safe to call from several threads.
    """

    durable = False

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._index = TaskIndex()
        self._seq = 0

    # -- writes ---------------------------------------------------------

    def append_task(self, task: Task) -> int:
        with self._lock:
            existing = self._index.tasks.get(task.id)
            if existing is not None and existing.state.terminal:
                raise StoreError(f"task {task.id} is already terminal")
            return self._append(RecordKind.TASK_UPSERT, task)

    def append_state(self, task_id: TaskId, state: TaskState, attempts_used: int, at: int) -> int:
        with self._lock:
            if task_id not in self._index.tasks:
                raise NotFound(f"unknown task {task_id}")
            return self._append(RecordKind.STATE_CHANGE, StateChange(task_id, state, attempts_used, at))

    def append_attempt(self, attempt: AttemptRecord) -> int:
        with self._lock:
            if attempt.task_id not in self._index.tasks:
                raise NotFound(f"unknown task {attempt.task_id}")
            expected = len(self._index.attempts.get(attempt.task_id, ())) + 1
            if attempt.attempt_number != expected:
                raise OutOfOrder(
                    f"task {attempt.task_id}: attempt {attempt.attempt_number} recorded, expected {expected}"
                )
            return self._append(RecordKind.ATTEMPT, attempt)

    def append_queue(self, config: QueueConfig) -> int:
        with self._lock:
            return self._append(RecordKind.QUEUE_CREATE, config)

    def persist_task(self, task: Task) -> int:
        seq = self.append_task(task)
        self.wait_durable(seq)
        return seq

    def record_state(self, task_id: TaskId, state: TaskState, attempts_used: int, at: int) -> int:
        seq = self.append_state(task_id, state, attempts_used, at)
        self.wait_durable(seq)
        return seq

    def record_attempt(self, attempt: AttemptRecord) -> int:
        seq = self.append_attempt(attempt)
        self.wait_durable(seq)
        return seq

    def save_queue(self, config: QueueConfig) -> int:
        seq = self.append_queue(config)
        self.wait_durable(seq)
        return seq

    def _append(self, kind: RecordKind, body: Body) -> int:
        seq = self._seq + 1
        record = StoreRecord(kind, seq, body)
        self._write(record)
        self._seq = seq
        self._index.apply(record)
        return seq

    def _write(self, record: StoreRecord) -> None:
        """Backend hook: make the record visible to a later restart."""

    # -- durability -----------------------------------------------------

    def wait_durable(self, seq: int) -> None:
        """Block until record `seq` survives the failures this backend covers."""

    async def flushed(self, seq: int) -> None:
        """Async form of wait_durable."""

    # -- reads ----------------------------------------------------------

    def load_recoverable(self) -> list[Task]:
        """Non-terminal tasks with their last persisted state, in enqueue order."""
        with self._lock:
            return self._index.recoverable()

    def get_task(self, task_id: TaskId) -> Optional[Task]:
        with self._lock:
            return self._index.tasks.get(task_id)

    def history(self, task_id: TaskId) -> list[AttemptRecord]:
        with self._lock:
            return list(self._index.attempts.get(task_id, ()))

    def queues(self) -> list[QueueConfig]:
        with self._lock:
            return list(self._index.queues.values())

    def snapshot(self) -> dict:
        with self._lock:
            return self._index.snapshot()

    @property
    def last_sequence(self) -> int:
        return self._seq

    # -- maintenance ----------------------------------------------------

    def compact(self) -> None:
        with self._lock:
            if self._seq == 0:
                return
            index = TaskIndex()
            seq = self._seq
            bodies: list[Body] = [Checkpoint(0, now_ms())]
            bodies += self._index.reconstruction()
            for body in bodies:
                seq += 1
                index.apply(StoreRecord(kind_of(body), seq, body))
            self._seq = seq
            self._index = index

    def close(self) -> None:
        pass

    def __enter__(self) -> TaskStore:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class MemoryStore(TaskStore):
    """Volatile backend: holds everything in process memory only."""
