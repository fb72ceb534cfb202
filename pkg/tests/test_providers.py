"""Gateway tests: fixtures, retry policy, fingerprints, budget guard."""

from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from aula.providers import (
    BACKOFF_SECONDS,
    BudgetExceeded,
    MissingImage,
    MockProvider,
    NotMockProvider,
    OpenAIChatProvider,
    ProviderGateway,
    ProviderRejected,
    ProviderRequest,
    ProviderTimeout,
    TransportError,
    UnknownFixture,
    chat_request,
    vision_request,
)


@pytest.fixture
def mock():
    return MockProvider()


@pytest.fixture
def sleeps():
    return []


@pytest.fixture
def gw(mock, sleeps):
    return ProviderGateway(mock, sleep=sleeps.append)


def test_fixture_echo(gw, mock):
    req = chat_request("sys", {"q": "hello"}, task="t")
    mock.register_fixture(req.fingerprint, "Hello")
    assert gw.complete_chat(req).text == "Hello"


def test_reregister_fixture_last_write_wins(gw, mock):
    req = chat_request("sys", {"q": 1}, task="t")
    mock.register_fixture(req.fingerprint, "first")
    mock.register_fixture(req.fingerprint, "second")
    assert gw.complete_chat(req).text == "second"


def test_strict_mock_raises_unknown_fixture():
    gw = ProviderGateway(MockProvider(strict=True), sleep=lambda _s: None)
    with pytest.raises(UnknownFixture):
        gw.complete_chat(chat_request("sys", {}, task="t"))


def test_fail_twice_then_succeed(gw, mock, sleeps):
    req = chat_request("sys", {}, task="t")
    mock.register_fixture(req.fingerprint, "ok")
    mock.fail(2)
    assert gw.complete_chat(req).text == "ok"
    assert mock.attempt_count == 3
    assert sleeps == [BACKOFF_SECONDS[0], BACKOFF_SECONDS[1]]


def test_always_failing_times_out_after_three_attempts(gw, mock):
    mock.fail(None)
    with pytest.raises(ProviderTimeout):
        gw.complete_chat(chat_request("sys", {}, task="t"))
    assert mock.attempt_count == 3


def test_rejection_is_not_retried(gw, mock):
    def reject(_req):
        raise ProviderRejected("no")

    mock.register_handler("t", lambda req: "unused")
    mock.send = lambda req: (_ for _ in ()).throw(ProviderRejected("no"))  # type: ignore
    with pytest.raises(ProviderRejected):
        gw.complete_chat(chat_request("sys", {}, task="t"))


def test_vision_without_image_is_missing_image(gw):
    req = ProviderRequest(kind="vision")
    with pytest.raises(MissingImage):
        gw.describe_image(req)


def test_vision_fixture_echo(gw, mock):
    req = vision_request("sys", {"page_index": 1}, b"imagebytes", task="extract")
    mock.register_fixture(req.fingerprint, "diagram of a transformer")
    assert gw.describe_image(req).text == "diagram of a transformer"


def test_identical_requests_get_identical_responses(gw):
    req1 = chat_request("sys", {"a": 1, "b": 2}, task="t")
    req2 = chat_request("sys", {"a": 1, "b": 2}, task="t")
    assert gw.complete_chat(req1).text == gw.complete_chat(req2).text


def test_register_fixture_requires_mock_backend():
    backend = OpenAIChatProvider("http://localhost:1", "model-x")
    gw = ProviderGateway(backend, sleep=lambda _s: None)
    with pytest.raises(NotMockProvider):
        gw.register_fixture("fp", "text")


def test_kind_checked_by_ops(gw):
    with pytest.raises(ValueError):
        gw.complete_chat(vision_request("s", {}, b"x", task="t"))
    with pytest.raises(ValueError):
        gw.describe_image(chat_request("s", {}, task="t"))


def test_budget_guard():
    mock = MockProvider()
    gw = ProviderGateway(mock, sleep=lambda _s: None, token_budget=1100)
    req = chat_request("sys", {}, task="t", max_tokens=1024)
    gw.complete_chat(req)
    with pytest.raises(BudgetExceeded):
        gw.complete_chat(req)


def test_temperature_and_token_validation():
    with pytest.raises(ValueError):
        ProviderRequest(kind="chat", temperature=2.5)
    with pytest.raises(ValueError):
        ProviderRequest(kind="chat", max_tokens=0)


def test_fingerprint_covers_content():
    a = chat_request("sys", {"x": 1}, task="t")
    b = chat_request("sys", {"x": 2}, task="t")
    c = chat_request("sys2", {"x": 1}, task="t")
    assert len({a.fingerprint, b.fingerprint, c.fingerprint}) == 3


@given(st.dictionaries(
    st.from_regex(r"[a-z]{1,6}", fullmatch=True),
    st.from_regex(r"[a-z0-9]{1,6}", fullmatch=True),
    min_size=2, max_size=6,
))
def test_fingerprint_stable_under_metadata_permutation(metadata):
    items = list(metadata.items())
    forward = ProviderRequest(kind="chat", metadata=dict(items))
    backward = ProviderRequest(kind="chat", metadata=dict(reversed(items)))
    assert forward.fingerprint == backward.fingerprint


def test_handler_lookup_by_task(mock, gw):
    mock.register_handler("greet", lambda req: "hi there")
    assert gw.complete_chat(chat_request("s", {}, task="greet")).text == "hi there"


def test_fixture_beats_handler(mock, gw):
    req = chat_request("s", {}, task="greet")
    mock.register_handler("greet", lambda r: "handler")
    mock.register_fixture(req.fingerprint, "fixture")
    assert gw.complete_chat(req).text == "fixture"


def test_in_flight_limit_serializes_calls():
    import threading
    active = {"now": 0, "peak": 0}
    lock = threading.Lock()

    class SlowBackend:
        provider_id = "slow"

        def send(self, req):
            with lock:
                active["now"] += 1
                active["peak"] = max(active["peak"], active["now"])
            import time as t
            t.sleep(0.01)
            with lock:
                active["now"] -= 1
            return __import__("aula.providers", fromlist=["ProviderResponse"]).ProviderResponse("ok")

    gw = ProviderGateway(SlowBackend(), sleep=lambda _s: None, max_in_flight=2)
    threads = [threading.Thread(target=lambda: gw.complete_chat(chat_request("s", {"i": i}, task="t")))
               for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert active["peak"] <= 2
