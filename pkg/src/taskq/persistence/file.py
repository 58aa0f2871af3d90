"""Append-only log backend.

Every record goes to ``<directory>/tasks.log`` with a plain ``write`` before
the call returns, so a killed process loses nothing that was acknowledged.
With ``fsync_each_write`` the file is also fsynced before a write counts as
durable; callers waiting at the same time share one fsync (group commit).
"""

from __future__ import annotations

import asyncio
import logging
import os
import threading
from typing import Optional

from ..model import Task, now_ms
from .base import CorruptLog, StoreIOError, TaskIndex, TaskStore
from .codec import Checkpoint, RecordKind, StoreRecord, encode_record, kind_of, scan

log = logging.getLogger(__name__)

LOG_NAME = "tasks.log"
COMPACTING_NAME = "tasks.log.compacting"


class FileStore(TaskStore):
    durable = True

    def __init__(self, directory: str | os.PathLike, fsync_each_write: bool = True):
        super().__init__()
        self.directory = os.fspath(directory)
        self.fsync_each_write = fsync_each_write
        self.path = os.path.join(self.directory, LOG_NAME)
        self.corruption: Optional[CorruptLog] = None
        self._broken: Optional[str] = None
        self._generation = 0

        if not os.path.isdir(self.directory):
            raise StoreIOError(f"store directory {self.directory!r} does not exist")
        if not os.access(self.directory, os.W_OK):
            raise StoreIOError(f"store directory {self.directory!r} is not writable")
        try:
            self._replay()
            created = not os.path.exists(self.path)
            self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            if created:
                _fsync_dir(self.directory)
        except OSError as exc:
            raise StoreIOError(f"cannot open {self.path}: {exc}") from exc
        self._size = self._file_size()

        self._sync_lock = threading.Lock()
        self._written = self._seq
        self._synced = self._seq
        self._waiters: list[tuple[int, asyncio.Future]] = []
        self._flush_scheduled = False
        self._closed = False

    # -- open / replay --------------------------------------------------

    def _replay(self) -> None:
        if not os.path.isfile(self.path):
            return
        with open(self.path, "rb") as fh:
            data = fh.read()
        result = scan(data)
        for record in result.records:
            self._index.apply(record)
            if record.kind is RecordKind.CHECKPOINT:
                self._generation = record.body.generation
        if result.records:
            self._seq = result.records[-1].sequence
        if result.error is not None:
            log.warning(
                "task log %s damaged at byte %d (%s); dropping %d record(s), %d byte(s)",
                self.path, result.valid_bytes, result.error, result.dropped_records, result.dropped_bytes,
            )
            self.corruption = CorruptLog(
                f"{result.error} at byte {result.valid_bytes}",
                self._index.recoverable(),
                result.dropped_records,
                result.dropped_bytes,
            )
            # later appends must follow the last good frame
            os.truncate(self.path, result.valid_bytes)

    def _file_size(self) -> int:
        try:
            return os.fstat(self._fd).st_size
        except OSError:
            return 0

    def load_recoverable(self) -> list[Task]:
        if self.corruption is not None:
            raise self.corruption
        return super().load_recoverable()

    # -- writes ---------------------------------------------------------

    def _write(self, record: StoreRecord) -> None:
        if self._broken is not None:
            raise StoreIOError(self._broken)
        data = encode_record(record.sequence, record.body)
        try:
            written = os.write(self._fd, data)
            if written != len(data):
                raise OSError(f"short write ({written} of {len(data)} bytes)")
        except OSError as exc:
            self._rollback(exc)
            raise StoreIOError(f"write to {self.path} failed: {exc}") from exc
        self._size += len(data)
        self._written = record.sequence

    def _rollback(self, exc: OSError) -> None:
        try:
            os.ftruncate(self._fd, self._size)
        except OSError:
            self._broken = f"log unusable after failed write: {exc}"
            log.error("%s", self._broken)

    # -- durability -----------------------------------------------------

    def sync(self) -> None:
        """fsync everything written so far. Concurrent callers share one fsync."""
        with self._sync_lock:
            target = self._written
            if self._synced >= target:
                return
            try:
                os.fsync(self._fd)
            except OSError as exc:
                raise StoreIOError(f"fsync of {self.path} failed: {exc}") from exc
            self._synced = target

    def wait_durable(self, seq: int) -> None:
        if self.fsync_each_write and self._synced < seq:
            self.sync()

    async def flushed(self, seq: int) -> None:
        # Waiters that pile up during one pass of the event loop are covered
        # by a single fsync issued when the loop next gets to its callbacks.
        if not self.fsync_each_write or self._synced >= seq:
            return
        loop = asyncio.get_running_loop()
        fut = loop.create_future()
        self._waiters.append((seq, fut))
        if not self._flush_scheduled:
            self._flush_scheduled = True
            loop.call_soon(self._flush_waiters)
        await fut

    def _flush_waiters(self) -> None:
        self._flush_scheduled = False
        waiters, self._waiters = self._waiters, []
        try:
            self.sync()
        except StoreIOError as exc:
            log.error("%s", exc)
            for _, fut in waiters:
                if not fut.done():
                    fut.set_exception(exc)
            return
        for seq, fut in waiters:
            if fut.done():
                continue
            if seq <= self._synced:
                fut.set_result(None)
            else:
                self._waiters.append((seq, fut))
        if self._waiters and not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_soon(self._flush_waiters)

    # -- maintenance ----------------------------------------------------

    def compact(self) -> None:
        """Rewrite the log with only what live tasks need.

        Writers are blocked for the duration. On any failure the original
        log is left untouched.
        """
        with self._lock, self._sync_lock:
            if self._seq == 0:
                return
            seq = self._seq
            generation = self._generation + 1
            records = []
            for body in [Checkpoint(generation, now_ms()), *self._index.reconstruction()]:
                seq += 1
                records.append(StoreRecord(kind_of(body), seq, body))
            tmp = os.path.join(self.directory, COMPACTING_NAME)
            try:
                fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
                try:
                    data = b"".join(encode_record(r.sequence, r.body) for r in records)
                    view = memoryview(data)
                    while view:
                        view = view[os.write(fd, view):]
                    os.fsync(fd)
                finally:
                    os.close(fd)
                os.replace(tmp, self.path)
                _fsync_dir(self.directory)
                new_fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)
            except OSError as exc:
                try:
                    os.unlink(tmp)
                except OSError:
                    pass
                raise StoreIOError(f"compaction failed: {exc}") from exc

            old_fd, self._fd = self._fd, new_fd
            os.close(old_fd)
            index = TaskIndex()
            for record in records:
                index.apply(record)
            self._index = index
            self._generation = generation
            self._seq = seq
            self._size = len(data)
            self._written = self._synced = seq

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            if self.fsync_each_write:
                try:
                    self.sync()
                except StoreIOError as exc:
                    log.error("%s", exc)
            self._broken = "store is closed"
            try:
                os.close(self._fd)
            except OSError:
                pass


def _fsync_dir(directory: str) -> None:
    fd = os.open(directory, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)
