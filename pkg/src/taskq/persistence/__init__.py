"""Pluggable task storage: a volatile in-memory backend and a durable log file."""

from .base import CorruptLog, MemoryStore, NotFound, OutOfOrder, StoreError, StoreIOError, TaskIndex, TaskStore
from .codec import Checkpoint, RecordKind, StateChange, StoreRecord
from .file import FileStore


def open_store(backend: str = "memory", directory: str | None = None, fsync: bool = True) -> TaskStore:
    backend = backend.lower()
    if backend == "memory":
        return MemoryStore()
    if backend == "file":
        if not directory:
            raise StoreIOError("file backend needs a directory")
        return FileStore(directory, fsync_each_write=fsync)
    raise ValueError(f"unknown store backend {backend!r}")


__all__ = [
    "Checkpoint",
    "CorruptLog",
    "FileStore",
    "MemoryStore",
    "NotFound",
    "OutOfOrder",
    "RecordKind",
    "StateChange",
    "StoreError",
    "StoreIOError",
    "StoreRecord",
    "TaskIndex",
    "TaskStore",
    "open_store",
]
