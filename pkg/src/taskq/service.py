"""HTTP/JSON front end: queue creation, task submission, inspection.

Submissions are answered 202 only after the task is durable in the
configured store.
"""

from __future__ import annotations

import argparse
import asyncio
import base64
import binascii
import json
import logging
import os
import signal
import uuid
from dataclasses import dataclass
from typing import Any, Optional

from aiohttp import web

from .manager import QueueError, TaskQueueManager, UnknownQueue
from .model import ValidationError, validate_task
from .persistence import StoreError, TaskStore, open_store
from .workers import WorkerPool, WorkerPoolConfig

log = logging.getLogger(__name__)

ERROR_CODES = frozenset(
    {"duplicate_name", "unknown_queue", "unknown_task", "validation_failed", "store_unavailable"}
)

MANAGER_KEY = web.AppKey("manager", TaskQueueManager)


@dataclass
class ServiceConfig:
    listen: str = "127.0.0.1:7420"
    store: str = "memory"
    store_dir: Optional[str] = None
    fsync: bool = True
    workers: int = 16
    handoff_buffer: int = 256

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)


def error(status: int, code: str, message: str, field: Optional[str] = None) -> web.Response:
    assert code in ERROR_CODES, code
    body: dict[str, Any] = {"code": code, "message": message}
    if field is not None:
        body["field"] = field
    return web.json_response(body, status=status)


async def _json_body(request: web.Request) -> dict:
    try:
        body = await request.json()
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ValidationError("body", "not valid JSON") from None
    if not isinstance(body, dict):
        raise ValidationError("body", "must be a JSON object")
    return body


async def create_queue(request: web.Request) -> web.Response:
    manager = request.app[MANAGER_KEY]
    try:
        body = await _json_body(request)
        config = await manager.create_queue(body.get("name"), body.get("capacity"), body.get("refill_interval_ms"))
    except ValidationError as exc:
        return error(422, "validation_failed", exc.message, exc.field)
    except QueueError as exc:
        if exc.code == "duplicate_name":
            return error(409, "duplicate_name", str(exc), "name")
        return error(422, "validation_failed", str(exc), getattr(exc, "field", None))
    except StoreError as exc:
        return error(503, "store_unavailable", str(exc))
    return web.json_response(config.to_json(), status=201)


async def list_queues(request: web.Request) -> web.Response:
    manager = request.app[MANAGER_KEY]
    return web.json_response([q.config.to_json() for q in manager.queues.values()])


async def queue_stats(request: web.Request) -> web.Response:
    manager = request.app[MANAGER_KEY]
    try:
        return web.json_response(manager.queue_stats(request.match_info["name"]))
    except UnknownQueue as exc:
        return error(404, "unknown_queue", str(exc))


async def submit_task(request: web.Request) -> web.Response:
    manager = request.app[MANAGER_KEY]
    queue_name = request.match_info["name"]
    try:
        body = await _json_body(request)
        spec = {
            "queue": queue_name,
            "name": body.get("name"),
            "destination": body.get("destination"),
            "method": body.get("method"),
            "payload": _decode_payload(body.get("payload_base64")),
            "content_type": body.get("content_type"),
            "max_retries": body.get("max_retries"),
            "backoff_ms": body.get("backoff_ms"),
            "ack_timeout_ms": body.get("ack_timeout_ms"),
        }
        task = validate_task(spec)
        task = await manager.submit(task)
    except ValidationError as exc:
        return error(422, "validation_failed", exc.message, exc.field)
    except UnknownQueue as exc:
        return error(404, "unknown_queue", str(exc))
    except StoreError as exc:
        log.error("rejecting submission: %s", exc)
        return error(503, "store_unavailable", str(exc))
    return web.json_response({"task_id": str(task.id)}, status=202)


def _decode_payload(value: Any) -> bytes:
    if value is None:
        return b""
    if not isinstance(value, str):
        raise ValidationError("payload_base64", "must be a base64 string")
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError):
        raise ValidationError("payload_base64", "not valid base64") from None


async def get_task(request: web.Request) -> web.Response:
    manager = request.app[MANAGER_KEY]
    try:
        task_id = uuid.UUID(request.match_info["task_id"])
    except ValueError:
        return error(404, "unknown_task", "no such task")
    task = manager.get_task(task_id)
    if task is None:
        return error(404, "unknown_task", "no such task")
    body = {
        "task": task.to_json(),
        "state": task.state.value,
        "attempts_used": task.attempts_used,
        "attempt_history": [a.to_json() for a in manager.store.history(task_id)],
    }
    if task_id in manager.annotations:
        body["annotation"] = manager.annotations[task_id]
    return web.json_response(body)


def build_app(manager: TaskQueueManager) -> web.Application:
    app = web.Application()
    app[MANAGER_KEY] = manager
    app.router.add_post("/v1/queues", create_queue)
    app.router.add_get("/v1/queues", list_queues)
    app.router.add_get("/v1/queues/{name}/stats", queue_stats)
    app.router.add_post("/v1/queues/{name}/tasks", submit_task)
    app.router.add_get("/v1/tasks/{task_id}", get_task)
    return app


class TaskQueueService:
    """Store, worker pool, queue manager and HTTP front end on one loop."""

    def __init__(self, config: ServiceConfig, store: Optional[TaskStore] = None):
        self.config = config
        self._store = store
        self.store: Optional[TaskStore] = None
        self.pool: Optional[WorkerPool] = None
        self.manager: Optional[TaskQueueManager] = None
        self.url: Optional[str] = None
        self._runner: Optional[web.AppRunner] = None

    async def start(self) -> str:
        cfg = self.config
        self.store = self._store or open_store(cfg.store, cfg.store_dir, cfg.fsync)
        self.pool = WorkerPool(self.store, WorkerPoolConfig(cfg.workers, cfg.handoff_buffer))
        self.manager = TaskQueueManager(self.store, self.pool)
        await self.pool.start()
        self.manager.load_queues()
        recovered = await self.manager.recover()
        if recovered:
            log.info("recovered %d unfinished task(s)", recovered)
        self._runner = web.AppRunner(build_app(self.manager), access_log=None)
        await self._runner.setup()
        host, port = cfg.host_port
        await web.TCPSite(self._runner, host, port).start()
        bound = self._runner.addresses[0]
        self.url = f"http://{bound[0]}:{bound[1]}"
        return self.url

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None
        if self.manager is not None:
            await self.manager.stop()
        if self.pool is not None:
            await self.pool.stop()
        if self.store is not None:
            self.store.close()

    async def __aenter__(self) -> TaskQueueService:
        await self.start()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.stop()


def _env(name: str, default: Any) -> Any:
    return os.environ.get(f"TASKQ_{name}", default)


def _bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {value!r}")


def parse_args(argv: Optional[list[str]] = None) -> ServiceConfig:
    parser = argparse.ArgumentParser(prog="taskq-service", description="Rate-limited HTTP task queue")
    parser.add_argument("--listen", default=_env("LISTEN", "127.0.0.1:7420"))
    parser.add_argument("--store", choices=["memory", "file"], default=_env("STORE", "memory"))
    parser.add_argument("--store-dir", default=_env("STORE_DIR", None))
    parser.add_argument("--fsync", type=_bool, default=_bool(_env("FSYNC", "true")))
    parser.add_argument("--workers", type=int, default=int(_env("WORKERS", 16)))
    parser.add_argument("--handoff-buffer", type=int, default=int(_env("HANDOFF_BUFFER", 256)))
    parser.add_argument("--log-level", default=_env("LOG_LEVEL", "WARNING"))
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.store == "file" and not args.store_dir:
        parser.error("--store file needs --store-dir")
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    if args.handoff_buffer < 0:
        parser.error("--handoff-buffer must be >= 0")
    return ServiceConfig(args.listen, args.store, args.store_dir, args.fsync, args.workers, args.handoff_buffer)


async def serve(config: ServiceConfig) -> None:
    service = TaskQueueService(config)
    url = await service.start()
    print(json.dumps({"listening": url}), flush=True)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()
    await service.stop()


def main(argv: Optional[list[str]] = None) -> None:
    asyncio.run(serve(parse_args(argv)))


if __name__ == "__main__":
    main()
