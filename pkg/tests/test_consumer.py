import asyncio
import uuid

import aiohttp
import pytest

from taskq.consumer import ConsumerScript, FailureMode, MockConsumer


async def deliver(session, url, task_id, attempt, path="/run", headers=None):
    hdrs = {"X-Task-Id": task_id, "X-Task-Attempt": str(attempt), "X-Queue-Name": "q"}
    if headers is not None:
        hdrs = headers
    async with session.post(url + path, data=b"x", headers=hdrs) as resp:
        return resp.status


def with_consumer(script, body, seed=None):
    async def go():
        consumer = MockConsumer(script, seed=seed)
        url = await consumer.start()
        try:
            async with aiohttp.ClientSession() as session:
                return await body(consumer, url, session)
        finally:
            await consumer.stop()

    return asyncio.run(go())


def test_none_answers_200():
    async def body(consumer, url, session):
        return await deliver(session, url, "a", 1)

    assert with_consumer(ConsumerScript(), body) == 200


def test_fail_first_k_is_per_task():
    async def body(consumer, url, session):
        a = [await deliver(session, url, "a", n) for n in (1, 2, 3)]
        b = [await deliver(session, url, "b", n) for n in (1, 2, 3)]
        return a, b

    script = ConsumerScript(failure_mode=FailureMode.FAIL_FIRST_K, k=2, status_on_fail=503)
    a, b = with_consumer(script, body)
    assert a == b == [503, 503, 200]


def test_always_fail_and_fail_rate_extremes():
    async def body(consumer, url, session):
        return [await deliver(session, url, str(i), 1) for i in range(5)]

    assert with_consumer(ConsumerScript(failure_mode=FailureMode.ALWAYS_FAIL), body) == [500] * 5
    assert with_consumer(ConsumerScript(failure_mode=FailureMode.FAIL_RATE, p=0.0), body) == [200] * 5
    assert with_consumer(ConsumerScript(failure_mode=FailureMode.FAIL_RATE, p=1.0), body) == [500] * 5


def test_fail_rate_is_seeded():
    async def body(consumer, url, session):
        return [await deliver(session, url, str(i), 1) for i in range(40)]

    script = ConsumerScript(failure_mode=FailureMode.FAIL_RATE, p=0.5)
    first = with_consumer(script, body, seed=3)
    assert first == with_consumer(script, body, seed=3)
    assert 0 < first.count(500) < 40


def test_missing_headers_answered_400_and_logged():
    async def body(consumer, url, session):
        status = await deliver(session, url, "a", 1, headers={})
        return status, consumer.arrivals

    status, arrivals = with_consumer(ConsumerScript(), body)
    assert status == 400
    assert len(arrivals) == 1 and arrivals[0].status == 400


def test_latency_is_applied():
    async def body(consumer, url, session):
        loop = asyncio.get_running_loop()
        start = loop.time()
        await deliver(session, url, "a", 1)
        return loop.time() - start

    assert with_consumer(ConsumerScript(latency_ms=150), body) >= 0.15


def test_black_hole_never_answers():
    async def body(consumer, url, session):
        with pytest.raises(asyncio.TimeoutError):
            async with session.post(url + "/x", headers={"X-Task-Id": "a", "X-Task-Attempt": "1"},
                                    timeout=aiohttp.ClientTimeout(total=0.2)):
                pass
        await asyncio.sleep(0.05)
        return consumer.concurrent, len(consumer.arrivals)

    concurrent, logged = with_consumer(ConsumerScript(failure_mode=FailureMode.BLACK_HOLE), body)
    # the abandoned connection is cleaned up on the consumer side too
    assert concurrent == 0 and logged == 1


def test_arrivals_and_reset():
    async def body(consumer, url, session):
        tid = str(uuid.uuid4())
        for n in (1, 2, 3):
            await deliver(session, url, tid, n, path=f"/some/path/{n}")
        async with session.get(url + "/arrivals") as resp:
            log = await resp.json()
        async with session.post(url + "/reset", json={"failure_mode": "ALWAYS_FAIL"}) as resp:
            reset = await resp.json()
        async with session.get(url + "/arrivals") as resp:
            after = await resp.json()
        status = await deliver(session, url, tid, 4)
        return tid, log, reset, after, status

    tid, log, reset, after, status = with_consumer(ConsumerScript(), body)
    assert [(a["task_id"], a["attempt"]) for a in log["arrivals"]] == [(tid, 1), (tid, 2), (tid, 3)]
    assert [a["path"] for a in log["arrivals"]] == ["/some/path/1", "/some/path/2", "/some/path/3"]
    assert log["max_concurrent"] == 1
    times = [a["t_ms"] for a in log["arrivals"]]
    assert times == sorted(times)
    assert reset["script"]["failure_mode"] == "ALWAYS_FAIL"
    assert after == {"arrivals": [], "max_concurrent": 0}
    assert status == 500


def test_concurrency_counter():
    async def body(consumer, url, session):
        await asyncio.gather(*(deliver(session, url, str(i), 1) for i in range(6)))
        return consumer.max_concurrent

    assert with_consumer(ConsumerScript(latency_ms=100), body) == 6


@pytest.mark.parametrize("kwargs", [{"latency_ms": -1}, {"k": -1}, {"p": 1.5}, {"failure_mode": "SOMETIMES"}])
def test_script_validation(kwargs):
    with pytest.raises(ValueError):
        ConsumerScript(**kwargs)


def test_script_json_round_trip():
    script = ConsumerScript(12.5, FailureMode.FAIL_FIRST_K, 2, 0.1, 502)
    assert ConsumerScript.from_json(script.to_json()) == script
