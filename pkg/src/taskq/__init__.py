"""taskq: a rate-limited HTTP push task queue.

Tasks are admitted to named queues, released one token at a time by a
per-queue token bucket, delivered by a fixed pool of HTTP workers and
retried with a fixed backoff until acknowledged or out of attempts.
"""

from .bucket import TokenBucket
from .model import (
    AttemptRecord,
    Event,
    IllegalTransition,
    Outcome,
    QueueConfig,
    RetryPolicy,
    Task,
    TaskState,
    ValidationError,
    transition,
    validate_task,
)

__version__ = "0.1.0"

__all__ = [
    "AttemptRecord",
    "Event",
    "IllegalTransition",
    "Outcome",
    "QueueConfig",
    "RetryPolicy",
    "Task",
    "TaskState",
    "TokenBucket",
    "ValidationError",
    "transition",
    "validate_task",
]
