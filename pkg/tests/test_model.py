import uuid

import pytest
from hypothesis import given, strategies as st

from taskq.model import (
    TRANSITIONS,
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

S, E = TaskState, Event

EXPECTED_EDGES = {
    (S.QUEUED, E.ENQUEUED_TO_BUCKET_GATE): S.AWAITING_TOKEN,
    (S.AWAITING_TOKEN, E.TOKEN_GRANTED): S.DISPATCHED,
    (S.DISPATCHED, E.HANDED_TO_WORKER): S.IN_FLIGHT,
    (S.DISPATCHED, E.REQUEST_SENT): S.IN_FLIGHT,
    (S.IN_FLIGHT, E.ACK_RECEIVED): S.FINISHED,
    (S.IN_FLIGHT, E.ATTEMPT_FAILED_RETRY_ALLOWED): S.RETRY_WAIT,
    (S.IN_FLIGHT, E.ATTEMPT_FAILED_RETRIES_EXHAUSTED): S.FAILED,
    (S.RETRY_WAIT, E.BACKOFF_ELAPSED): S.DISPATCHED,
}


# -- validate_task ----------------------------------------------------------


def test_defaults_applied():
    task = validate_task({"queue": "q1", "destination": "http://10.0.0.2:8080/run", "method": "POST"})
    assert task.state is TaskState.QUEUED
    assert task.attempts_used == 0
    assert task.retry_policy == RetryPolicy(max_retries=3, backoff_ms=1000, ack_timeout_ms=5000)
    assert task.id.int != 0


def test_bad_url_rejected():
    with pytest.raises(ValidationError) as err:
        validate_task({"queue": "q1", "destination": "not a url", "method": "POST"})
    assert err.value.field == "destination"


def test_negative_retries_rejected():
    with pytest.raises(ValidationError) as err:
        validate_task({"queue": "q1", "destination": "http://h/x", "method": "POST", "max_retries": -1})
    assert err.value.field == "max_retries"


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"method": "BREW"}, "method"),
        ({"ack_timeout_ms": 0}, "ack_timeout_ms"),
        ({"backoff_ms": -5}, "backoff_ms"),
        ({"max_retries": 1.5}, "max_retries"),
        ({"max_retries": True}, "max_retries"),
        ({"destination": "ftp://h/x"}, "destination"),
        ({"destination": "http:///nohost"}, "destination"),
        ({"destination": "http://h:notaport/"}, "destination"),
        ({"queue": ""}, "queue"),
        ({"name": ""}, "name"),
        ({"content_type": 7}, "content_type"),
        ({"max_retries": 2**32}, "max_retries"),
    ],
)
def test_field_errors(patch, field):
    spec = {"queue": "q", "destination": "http://h/x", "method": "POST", **patch}
    with pytest.raises(ValidationError) as err:
        validate_task(spec)
    assert err.value.field == field


def test_method_is_case_insensitive_and_name_defaults():
    task = validate_task({"queue": "q", "destination": "https://h/x", "method": "put"}, at=5)
    assert task.method == "PUT"
    assert task.name == "https://h/x"
    assert task.created_at == task.updated_at == 5


def test_fresh_ids():
    spec = {"queue": "q", "destination": "http://h/x", "method": "POST"}
    assert len({validate_task(spec).id for _ in range(100)}) == 100


def test_nil_id_rejected():
    with pytest.raises(ValidationError):
        validate_task({"queue": "q", "destination": "http://h/x", "method": "POST"}, new_id=lambda: uuid.UUID(int=0))


def test_attempts_bounded_by_policy():
    policy = RetryPolicy(max_retries=1)
    Task(uuid.uuid4(), "n", "q", "http://h/", "GET", retry_policy=policy, attempts_used=2)
    with pytest.raises(ValidationError):
        Task(uuid.uuid4(), "n", "q", "http://h/", "GET", retry_policy=policy, attempts_used=3)


# -- transitions ------------------------------------------------------------


def test_examples():
    assert transition(S.IN_FLIGHT, E.ACK_RECEIVED) is S.FINISHED
    assert transition(S.IN_FLIGHT, E.ATTEMPT_FAILED_RETRIES_EXHAUSTED) is S.FAILED
    assert transition(S.RETRY_WAIT, E.BACKOFF_ELAPSED) is S.DISPATCHED
    with pytest.raises(IllegalTransition):
        transition(S.FINISHED, E.ACK_RECEIVED)


def test_exhaustive_pairs():
    assert TRANSITIONS == EXPECTED_EDGES
    for state in TaskState:
        for event in Event:
            if (state, event) in EXPECTED_EDGES:
                assert transition(state, event) is EXPECTED_EDGES[(state, event)]
            else:
                with pytest.raises(IllegalTransition):
                    transition(state, event)


def test_terminals_have_no_exits():
    for state in (S.FINISHED, S.FAILED):
        assert state.terminal
        for event in Event:
            with pytest.raises(IllegalTransition):
                transition(state, event)


def test_retry_wait_only_leads_to_dispatched():
    successors = {dst for (src, _), dst in TRANSITIONS.items() if src is S.RETRY_WAIT}
    assert successors == {S.DISPATCHED}


@given(
    max_retries=st.integers(0, 6),
    events=st.lists(st.sampled_from(list(Event)), max_size=60),
)
def test_random_walks_respect_attempt_bound(max_retries, events):
    # drive a task the way the owning modules do: count an attempt on every
    # entry to DISPATCHED and pick the failure edge from the remaining budget
    task = Task(uuid.uuid4(), "n", "q", "http://h/", "POST", retry_policy=RetryPolicy(max_retries=max_retries))
    for event in events:
        if event in (E.ATTEMPT_FAILED_RETRY_ALLOWED, E.ATTEMPT_FAILED_RETRIES_EXHAUSTED):
            allowed = task.attempts_used <= max_retries
            event = E.ATTEMPT_FAILED_RETRY_ALLOWED if allowed else E.ATTEMPT_FAILED_RETRIES_EXHAUSTED
        try:
            nxt = transition(task.state, event)
        except IllegalTransition:
            continue
        bump = 1 if nxt is S.DISPATCHED else 0
        task = task.advance(event, 0, attempts_used=task.attempts_used + bump)
        assert task.attempts_used <= 1 + max_retries


# -- records ------------------------------------------------------------------


def test_attempt_record_invariants():
    tid = uuid.uuid4()
    AttemptRecord(tid, 1, 10, 10, Outcome.ACKED, 204)
    with pytest.raises(ValueError):
        AttemptRecord(tid, 1, 10, 9, Outcome.NACKED, 500)
    with pytest.raises(ValueError):
        AttemptRecord(tid, 1, 10, 11, Outcome.ACKED, 500)
    with pytest.raises(ValueError):
        AttemptRecord(tid, 1, 10, 11, Outcome.NACKED, 200)
    with pytest.raises(ValueError):
        AttemptRecord(tid, 0, 10, 11, Outcome.TIMED_OUT)


def test_queue_config_validation():
    with pytest.raises(ValidationError) as err:
        QueueConfig(uuid.uuid4(), "x", 0, 100)
    assert err.value.field == "capacity"
    with pytest.raises(ValidationError) as err:
        QueueConfig(uuid.uuid4(), "x", 1, 0)
    assert err.value.field == "refill_interval_ms"
    with pytest.raises(ValidationError):
        QueueConfig(uuid.uuid4(), "", 1, 1)
