"""Binary record format for the task log.

Frame:  u32 body_length | u32 crc32(body) | body
Body:   u8 kind | u64 sequence | payload

All integers are big-endian. Text is u32 byte length + UTF-8, byte strings
are u32 length + raw bytes, UUIDs are 16 raw bytes, timestamps are u64
milliseconds since the epoch. docs/log-format.md has the full layout.
"""

from __future__ import annotations

import enum
import struct
import uuid
import zlib
from dataclasses import dataclass
from typing import Optional, Union

from ..model import AttemptRecord, Outcome, QueueConfig, RetryPolicy, Task, TaskState

FRAME_HEADER = struct.Struct(">II")
BODY_HEADER = struct.Struct(">BQ")

STATE_CODES = {
    TaskState.QUEUED: 1,
    TaskState.AWAITING_TOKEN: 2,
    TaskState.DISPATCHED: 3,
    TaskState.IN_FLIGHT: 4,
    TaskState.RETRY_WAIT: 5,
    TaskState.FINISHED: 6,
    TaskState.FAILED: 7,
}
OUTCOME_CODES = {
    Outcome.ACKED: 1,
    Outcome.TIMED_OUT: 2,
    Outcome.TRANSPORT_ERROR: 3,
    Outcome.NACKED: 4,
}
_STATES = {v: k for k, v in STATE_CODES.items()}
_OUTCOMES = {v: k for k, v in OUTCOME_CODES.items()}

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_STATE_CHANGE = struct.Struct(">16sBIQ")
_ATTEMPT = struct.Struct(">16sIQQBBH")
_CHECKPOINT = struct.Struct(">IQ")


class RecordKind(enum.IntEnum):
    TASK_UPSERT = 1
    STATE_CHANGE = 2
    ATTEMPT = 3
    QUEUE_CREATE = 4
    CHECKPOINT = 5


class DecodeError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class StateChange:
    task_id: uuid.UUID
    state: TaskState
    attempts_used: int
    at: int


@dataclass(frozen=True, slots=True)
class Checkpoint:
    """Marks the start of a compacted log generation."""

    generation: int
    at: int


Body = Union[Task, StateChange, AttemptRecord, QueueConfig, Checkpoint]


@dataclass(frozen=True, slots=True)
class StoreRecord:
    kind: RecordKind
    sequence: int
    body: Body


def _text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _blob(value: bytes) -> bytes:
    return _U32.pack(len(value)) + value


def encode_task(task: Task) -> bytes:
    policy = task.retry_policy
    parts = [
        task.id.bytes,
        _text(task.name),
        _text(task.queue),
        _text(task.destination),
        _text(task.method),
        _blob(task.payload),
        struct.pack(">III", policy.max_retries, policy.backoff_ms, policy.ack_timeout_ms),
        struct.pack(">BIQQ", STATE_CODES[task.state], task.attempts_used, task.created_at, task.updated_at),
    ]
    if task.content_type is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + _text(task.content_type))
    return b"".join(parts)


def kind_of(body: Body) -> RecordKind:
    if isinstance(body, Task):
        return RecordKind.TASK_UPSERT
    if isinstance(body, StateChange):
        return RecordKind.STATE_CHANGE
    if isinstance(body, AttemptRecord):
        return RecordKind.ATTEMPT
    if isinstance(body, QueueConfig):
        return RecordKind.QUEUE_CREATE
    if isinstance(body, Checkpoint):
        return RecordKind.CHECKPOINT
    raise TypeError(f"cannot encode {type(body).__name__}")


def encode_payload(body: Body) -> tuple[RecordKind, bytes]:
    if isinstance(body, Task):
        return RecordKind.TASK_UPSERT, encode_task(body)
    if isinstance(body, StateChange):
        return RecordKind.STATE_CHANGE, _STATE_CHANGE.pack(
            body.task_id.bytes, STATE_CODES[body.state], body.attempts_used, body.at
        )
    if isinstance(body, AttemptRecord):
        status = body.response_status
        return RecordKind.ATTEMPT, _ATTEMPT.pack(
            body.task_id.bytes,
            body.attempt_number,
            body.started_at,
            body.ended_at,
            OUTCOME_CODES[body.outcome],
            0 if status is None else 1,
            0 if status is None else status,
        )
    if isinstance(body, QueueConfig):
        return RecordKind.QUEUE_CREATE, b"".join(
            [
                body.id.bytes,
                _text(body.name),
                struct.pack(">IIQ", body.capacity, body.refill_interval_ms, body.created_at),
            ]
        )
    if isinstance(body, Checkpoint):
        return RecordKind.CHECKPOINT, _CHECKPOINT.pack(body.generation, body.at)
    raise TypeError(f"cannot encode {type(body).__name__}")


def encode_body(sequence: int, body: Body) -> bytes:
    kind, payload = encode_payload(body)
    return BODY_HEADER.pack(kind, sequence) + payload


def frame(body: bytes) -> bytes:
    return FRAME_HEADER.pack(len(body), zlib.crc32(body)) + body


def encode_record(sequence: int, body: Body) -> bytes:
    return frame(encode_body(sequence, body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError("truncated body")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def u32(self) -> int:
        return self.unpack(_U32)[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(str(exc)) from exc

    def blob(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes in record body")


def _state(code: int) -> TaskState:
    try:
        return _STATES[code]
    except KeyError:
        raise DecodeError(f"unknown state code {code}") from None


def _decode_task(r: _Reader) -> Task:
    task_id = uuid.UUID(bytes=r.take(16))
    name, queue, destination, method = r.text(), r.text(), r.text(), r.text()
    payload = r.blob()
    max_retries, backoff_ms, ack_timeout_ms = r.unpack(struct.Struct(">III"))
    state_code, attempts_used, created_at, updated_at = r.unpack(struct.Struct(">BIQQ"))
    content_type: Optional[str] = None
    flag = r.take(1)[0]
    if flag == 1:
        content_type = r.text()
    elif flag != 0:
        raise DecodeError("bad content_type flag")
    return Task(
        id=task_id,
        name=name,
        queue=queue,
        destination=destination,
        method=method,
        payload=payload,
        retry_policy=RetryPolicy(max_retries, backoff_ms, ack_timeout_ms),
        state=_state(state_code),
        attempts_used=attempts_used,
        created_at=created_at,
        updated_at=updated_at,
        content_type=content_type,
    )


def decode_body(body: bytes) -> StoreRecord:
    r = _Reader(body)
    kind_code, sequence = r.unpack(BODY_HEADER)
    try:
        kind = RecordKind(kind_code)
    except ValueError:
        raise DecodeError(f"unknown record kind {kind_code}") from None
    try:
        if kind is RecordKind.TASK_UPSERT:
            value: Body = _decode_task(r)
        elif kind is RecordKind.STATE_CHANGE:
            raw_id, state_code, attempts, at = r.unpack(_STATE_CHANGE)
            value = StateChange(uuid.UUID(bytes=raw_id), _state(state_code), attempts, at)
        elif kind is RecordKind.ATTEMPT:
            raw_id, number, started, ended, outcome, has_status, status = r.unpack(_ATTEMPT)
            if outcome not in _OUTCOMES:
                raise DecodeError(f"unknown outcome code {outcome}")
            value = AttemptRecord(
                uuid.UUID(bytes=raw_id), number, started, ended, _OUTCOMES[outcome], status if has_status else None
            )
        elif kind is RecordKind.QUEUE_CREATE:
            raw_id = r.take(16)
            name = r.text()
            capacity, interval, created = r.unpack(struct.Struct(">IIQ"))
            value = QueueConfig(uuid.UUID(bytes=raw_id), name, capacity, interval, created)
        else:
            value = Checkpoint(*r.unpack(_CHECKPOINT))
    except DecodeError:
        raise
    except ValueError as exc:
        # value objects reject impossible field combinations
        raise DecodeError(str(exc)) from exc
    r.done()
    return StoreRecord(kind, sequence, value)


@dataclass
class ScanResult:
    records: list[StoreRecord]
    valid_bytes: int
    dropped_records: int = 0
    dropped_bytes: int = 0
    error: Optional[str] = None


def scan(data: bytes) -> ScanResult:
    """Decode frames until the first one that fails its integrity check."""
    records: list[StoreRecord] = []
    pos = 0
    last_seq = 0
    error = None
    while pos < len(data):
        if pos + FRAME_HEADER.size > len(data):
            error = "torn frame header"
            break
        length, crc = FRAME_HEADER.unpack_from(data, pos)
        start = pos + FRAME_HEADER.size
        body = data[start:start + length]
        if len(body) < length:
            error = "torn frame body"
            break
        if zlib.crc32(body) != crc:
            error = "crc mismatch"
            break
        try:
            record = decode_body(body)
        except DecodeError as exc:
            error = f"undecodable record: {exc}"
            break
        if record.sequence <= last_seq:
            error = f"sequence {record.sequence} after {last_seq}"
            break
        last_seq = record.sequence
        records.append(record)
        pos = start + length
    if error is None:
        return ScanResult(records, pos)
    return ScanResult(records, pos, _count_frames(data, pos), len(data) - pos, error)


def _count_frames(data: bytes, pos: int) -> int:
    """Best-effort count of frames in a damaged tail, partial ones included."""
    count = 0
    while pos < len(data):
        count += 1
        if pos + FRAME_HEADER.size > len(data):
            break
        length, _ = FRAME_HEADER.unpack_from(data, pos)
        pos += FRAME_HEADER.size + length
    return count
