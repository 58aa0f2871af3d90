"""Task data structures and the task lifecycle state machine.

Lifecycle::

    QUEUED -> AWAITING_TOKEN -> DISPATCHED -> IN_FLIGHT -> FINISHED
                                    ^             |
                                    |             +-> RETRY_WAIT --+
                                    |             |                |
                                    +-------------|----------------+
                                                  +-> FAILED

A task leaving RETRY_WAIT goes straight back to DISPATCHED. It never
re-enters the token gate, so the configured backoff is what spaces retries.
"""

from __future__ import annotations

import base64
import enum
import time
import uuid
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, replace
from typing import Any, Optional
from urllib.parse import urlsplit

TaskId = uuid.UUID

ALLOWED_METHODS = frozenset({"GET", "POST", "PUT", "PATCH", "DELETE"})

DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_MS = 1000
DEFAULT_ACK_TIMEOUT_MS = 5000

_U32_MAX = 2**32 - 1


def now_ms() -> int:
    """Wall clock, milliseconds since the Unix epoch."""
    return time.time_ns() // 1_000_000


class TaskState(enum.Enum):
    QUEUED = "QUEUED"
    AWAITING_TOKEN = "AWAITING_TOKEN"
    DISPATCHED = "DISPATCHED"
    IN_FLIGHT = "IN_FLIGHT"
    RETRY_WAIT = "RETRY_WAIT"
    FINISHED = "FINISHED"
    FAILED = "FAILED"

    @property
    def terminal(self) -> bool:
        return self in (TaskState.FINISHED, TaskState.FAILED)


class Event(enum.Enum):
    ENQUEUED_TO_BUCKET_GATE = "enqueued_to_bucket_gate"
    TOKEN_GRANTED = "token_granted"
    HANDED_TO_WORKER = "handed_to_worker"
    REQUEST_SENT = "request_sent"
    ACK_RECEIVED = "ack_received"
    ATTEMPT_FAILED_RETRY_ALLOWED = "attempt_failed_retry_allowed"
    ATTEMPT_FAILED_RETRIES_EXHAUSTED = "attempt_failed_retries_exhausted"
    BACKOFF_ELAPSED = "backoff_elapsed"


class Outcome(enum.Enum):
    ACKED = "ACKED"
    TIMED_OUT = "TIMED_OUT"
    TRANSPORT_ERROR = "TRANSPORT_ERROR"
    NACKED = "NACKED"


S, E = TaskState, Event

TRANSITIONS: dict[tuple[TaskState, Event], TaskState] = {
    (S.QUEUED, E.ENQUEUED_TO_BUCKET_GATE): S.AWAITING_TOKEN,
    (S.AWAITING_TOKEN, E.TOKEN_GRANTED): S.DISPATCHED,
    # the worker picking the task up and the request going out are one step
    (S.DISPATCHED, E.HANDED_TO_WORKER): S.IN_FLIGHT,
    (S.DISPATCHED, E.REQUEST_SENT): S.IN_FLIGHT,
    (S.IN_FLIGHT, E.ACK_RECEIVED): S.FINISHED,
    (S.IN_FLIGHT, E.ATTEMPT_FAILED_RETRY_ALLOWED): S.RETRY_WAIT,
    (S.IN_FLIGHT, E.ATTEMPT_FAILED_RETRIES_EXHAUSTED): S.FAILED,
    (S.RETRY_WAIT, E.BACKOFF_ELAPSED): S.DISPATCHED,
}

del S, E


class ValidationError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class IllegalTransition(Exception):
    def __init__(self, state: TaskState, event: Event):
        super().__init__(f"no transition from {state.value} on {event.value}")
        self.state = state
        self.event = event


def transition(current: TaskState, event: Event) -> TaskState:
    try:
        return TRANSITIONS[(current, event)]
    except KeyError:
        raise IllegalTransition(current, event) from None


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    max_retries: int = DEFAULT_MAX_RETRIES
    backoff_ms: int = DEFAULT_BACKOFF_MS
    ack_timeout_ms: int = DEFAULT_ACK_TIMEOUT_MS

    def __post_init__(self) -> None:
        _check_int("max_retries", self.max_retries, 0)
        _check_int("backoff_ms", self.backoff_ms, 0)
        _check_int("ack_timeout_ms", self.ack_timeout_ms, 1)

    @property
    def max_attempts(self) -> int:
        return 1 + self.max_retries


@dataclass(frozen=True, slots=True)
class Task:
    id: TaskId
    name: str
    queue: str
    destination: str
    method: str
    payload: bytes = b""
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)
    state: TaskState = TaskState.QUEUED
    attempts_used: int = 0
    created_at: int = 0
    updated_at: int = 0
    content_type: Optional[str] = None

    def __post_init__(self) -> None:
        if self.id.int == 0:
            raise ValidationError("id", "nil uuid")
        if self.attempts_used < 0 or self.attempts_used > self.retry_policy.max_attempts:
            raise ValidationError(
                "attempts_used",
                f"{self.attempts_used} outside [0, {self.retry_policy.max_attempts}]",
            )

    def advance(self, event: Event, at: int, *, attempts_used: Optional[int] = None) -> Task:
        """Return a copy moved along `event`; raises IllegalTransition."""
        state = transition(self.state, event)
        if attempts_used is None:
            attempts_used = self.attempts_used
        return replace(self, state=state, attempts_used=attempts_used, updated_at=at)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": str(self.id),
            "name": self.name,
            "queue": self.queue,
            "destination": self.destination,
            "method": self.method,
            "payload_base64": base64.b64encode(self.payload).decode("ascii"),
            "content_type": self.content_type,
            "max_retries": self.retry_policy.max_retries,
            "backoff_ms": self.retry_policy.backoff_ms,
            "ack_timeout_ms": self.retry_policy.ack_timeout_ms,
            "state": self.state.value,
            "attempts_used": self.attempts_used,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }


@dataclass(frozen=True, slots=True)
class AttemptRecord:
    task_id: TaskId
    attempt_number: int
    started_at: int
    ended_at: int
    outcome: Outcome
    response_status: Optional[int] = None

    def __post_init__(self) -> None:
        if self.attempt_number < 1:
            raise ValueError("attempt_number must be positive")
        if self.ended_at < self.started_at:
            raise ValueError("ended_at precedes started_at")
        acked_status = self.response_status is not None and 200 <= self.response_status <= 299
        if (self.outcome is Outcome.ACKED) != acked_status:
            raise ValueError(f"outcome {self.outcome.value} inconsistent with status {self.response_status}")

    def to_json(self) -> dict[str, Any]:
        return {
            "attempt_number": self.attempt_number,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "outcome": self.outcome.value,
            "response_status": self.response_status,
        }


def _check_int(name: str, value: Any, minimum: int, maximum: int = _U32_MAX) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(name, "must be an integer")
    if value < minimum:
        raise ValidationError(name, f"must be >= {minimum}")
    if value > maximum:
        raise ValidationError(name, f"must be <= {maximum}")
    return value


def _check_url(value: Any) -> str:
    if not isinstance(value, str) or not value:
        raise ValidationError("destination", "must be an absolute http(s) URL")
    try:
        parts = urlsplit(value)
        parts.port  # raises on a malformed port
    except ValueError:
        raise ValidationError("destination", "must be an absolute http(s) URL") from None
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise ValidationError("destination", "must be an absolute http(s) URL")
    return value


def validate_task(
    spec: Mapping[str, Any],
    *,
    at: Optional[int] = None,
    new_id: Callable[[], TaskId] = uuid.uuid4,
) -> Task:
    """Build a QUEUED task from a raw submission.

    Recognised keys: queue, destination, method (required); name, payload,
    content_type, max_retries, backoff_ms, ack_timeout_ms (optional).
    Nothing is recorded anywhere, so a rejected submission leaves no trace.
    """
    queue = spec.get("queue")
    if not isinstance(queue, str) or not queue:
        raise ValidationError("queue", "must be a non-empty string")
    destination = _check_url(spec.get("destination"))

    method = spec.get("method")
    if not isinstance(method, str) or method.upper() not in ALLOWED_METHODS:
        raise ValidationError("method", f"must be one of {sorted(ALLOWED_METHODS)}")
    method = method.upper()

    name = spec.get("name")
    if name is None:
        name = destination
    if not isinstance(name, str) or not name:
        raise ValidationError("name", "must be a non-empty string")

    payload = spec.get("payload", b"")
    if payload is None:
        payload = b""
    if not isinstance(payload, (bytes, bytearray)):
        raise ValidationError("payload", "must be bytes")

    content_type = spec.get("content_type")
    if content_type is not None and (not isinstance(content_type, str) or not content_type):
        raise ValidationError("content_type", "must be a non-empty string")

    policy = RetryPolicy(
        max_retries=_check_int("max_retries", _opt(spec, "max_retries", DEFAULT_MAX_RETRIES), 0),
        backoff_ms=_check_int("backoff_ms", _opt(spec, "backoff_ms", DEFAULT_BACKOFF_MS), 0),
        ack_timeout_ms=_check_int("ack_timeout_ms", _opt(spec, "ack_timeout_ms", DEFAULT_ACK_TIMEOUT_MS), 1),
    )

    task_id = new_id()
    if task_id.int == 0:
        raise ValidationError("id", "nil uuid")
    stamp = now_ms() if at is None else at
    return Task(
        id=task_id,
        name=name,
        queue=queue,
        destination=destination,
        method=method,
        payload=bytes(payload),
        retry_policy=policy,
        created_at=stamp,
        updated_at=stamp,
        content_type=content_type,
    )


def _opt(spec: Mapping[str, Any], key: str, default: int) -> Any:
    value = spec.get(key)
    return default if value is None else value


@dataclass(frozen=True, slots=True)
class QueueConfig:
    id: uuid.UUID
    name: str
    capacity: int
    refill_interval_ms: int
    created_at: int = 0

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise ValidationError("name", "must be a non-empty string")
        _check_int("capacity", self.capacity, 1)
        _check_int("refill_interval_ms", self.refill_interval_ms, 1)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": str(self.id),
            "name": self.name,
            "capacity": self.capacity,
            "refill_interval_ms": self.refill_interval_ms,
            "created_at": self.created_at,
        }
