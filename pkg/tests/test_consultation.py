"""Consultation node: request composition, retries, the consume loop."""

from __future__ import annotations

import threading
import time

import pytest

from promptvision.bus import Bus, ensure_topics
from promptvision.consultation import (
    ConsoleSink,
    CredentialError,
    CredentialRef,
    HttpLlmClient,
    JsonlSink,
    RetryableError,
    ScriptedLlmClient,
    SkipSignal,
    ask_llm,
    build_llm_request,
    default_stub_client,
    load_stub_client,
    run_consultation_node,
)
from promptvision.messages import (
    CAMERA_DONE,
    GPT_CONSULTATION_TOPIC,
    IMAGE_DESCRIPTION_TOPIC,
    TASK_CONTROL_TOPIC,
    TASK_TOPICS,
    Consultation,
    ControlEvent,
    ImageDescription,
)
from promptvision.semantics import BackendTimeout

from test_config import CARMATE_LLM_PROMPT

PHONE_DESCRIPTION = (
    "The driver is holding a phone to their ear and looking away from the road."
)


def description(index=0, text=PHONE_DESCRIPTION) -> ImageDescription:
    return ImageDescription(
        task_name="driver phone usage",
        frame_index=index,
        capture_time=float(index),
        text=text,
        backend_id="mock",
        vision_prompt_digest=1,
    )


# -- request composition -----------------------------------------------------------

def test_two_role_composition_verbatim():
    request = build_llm_request(CARMATE_LLM_PROMPT, description(), 0.2)
    assert request.system_text == CARMATE_LLM_PROMPT
    assert request.user_text == PHONE_DESCRIPTION
    assert request.temperature == 0.2


def test_empty_description_is_skip_signal():
    with pytest.raises(SkipSignal):
        build_llm_request(CARMATE_LLM_PROMPT, description(text=""), 0.2)


def test_newlines_preserved_byte_exact():
    tricky = "line one\nline two\n\ttab"
    request = build_llm_request(CARMATE_LLM_PROMPT, description(text=tricky), 0.2)
    assert request.user_text == tricky


def test_temperature_range_enforced():
    with pytest.raises(ValueError):
        build_llm_request(CARMATE_LLM_PROMPT, description(), 2.5)


def test_credential_ref_hides_value():
    ref = CredentialRef(value="super-secret")
    assert "super-secret" not in repr(ref)
    assert ref.resolve() == "super-secret"


# -- scripted client ------------------------------------------------------------------

def test_stub_keyed_by_description():
    client = default_stub_client()
    req = build_llm_request("sys", description(), 0.2)
    assert ask_llm(client, req) == "Please put down your phone and focus on the road."

    attentive = description(text="The driver is looking straight ahead with both hands on the wheel.")
    req2 = build_llm_request("sys", attentive, 0.2)
    assert "focused" in ask_llm(client, req2)


def test_stub_fallback():
    client = ScriptedLlmClient([("nope", "never")], "generic advice")
    req = build_llm_request("sys", description(text="something else"), 0.2)
    assert ask_llm(client, req) == "generic advice"


def test_load_stub_client(tmp_path):
    path = tmp_path / "stub.tsv"
    path.write_text("# comment\nphone\tdrop it\n*\tdefault reply\n", encoding="utf-8")
    client = load_stub_client(path)
    req = build_llm_request("sys", description(), 0.2)
    assert ask_llm(client, req) == "drop it"
    req2 = build_llm_request("sys", description(text="nothing"), 0.2)
    assert ask_llm(client, req2) == "default reply"


# -- HTTP client -----------------------------------------------------------------------

def test_http_chat_returns_text_and_captures_prompts(stub_http):
    reply = "Please put down your phone and focus on the road."

    @stub_http.route("/chat")
    def _chat(body, headers):
        return 200, {"text": reply, "model": "gpt-3.5"}

    client = HttpLlmClient(stub_http.url, timeout=5.0)
    request = build_llm_request(CARMATE_LLM_PROMPT, description(), 0.2)
    assert ask_llm(client, request) == reply
    assert client.model_tag == "gpt-3.5"

    _, body = stub_http.requests[0]
    # Prompt fidelity over the wire: byte-identical role texts.
    assert body["system"] == CARMATE_LLM_PROMPT
    assert body["user"] == PHONE_DESCRIPTION
    assert body["temperature"] == 0.2


def test_http_401_is_credential_error_no_retry(stub_http):
    @stub_http.route("/chat")
    def _chat(body, headers):
        return 401, {"error": "bad key"}

    client = HttpLlmClient(stub_http.url, timeout=5.0)
    request = build_llm_request("sys", description(), 0.2)
    with pytest.raises(CredentialError):
        ask_llm(client, request, backoff=0.01)
    assert len(stub_http.requests) == 1


def test_http_rate_limit_retries_then_succeeds(stub_http):
    calls = {"n": 0}

    @stub_http.route("/chat")
    def _chat(body, headers):
        calls["n"] += 1
        if calls["n"] < 3:
            return 429, {"error": "slow down"}
        return 200, {"text": "finally"}

    client = HttpLlmClient(stub_http.url, timeout=5.0)
    request = build_llm_request("sys", description(), 0.2)
    assert ask_llm(client, request, backoff=0.01) == "finally"
    assert calls["n"] == 3


def test_http_persistent_rate_limit_exhausts_retries(stub_http):
    @stub_http.route("/chat")
    def _chat(body, headers):
        return 429, {"error": "slow down"}

    client = HttpLlmClient(stub_http.url, timeout=5.0)
    request = build_llm_request("sys", description(), 0.2)
    with pytest.raises(RetryableError):
        ask_llm(client, request, max_tries=3, backoff=0.01)
    assert len(stub_http.requests) == 3


def test_http_timeout_after_backoff_budget(stub_http):
    @stub_http.route("/chat")
    def _chat(body, headers):
        time.sleep(2.0)
        return 200, {"text": "late"}

    client = HttpLlmClient(stub_http.url, timeout=0.2)
    request = build_llm_request("sys", description(), 0.2)
    start = time.perf_counter()
    with pytest.raises(BackendTimeout):
        ask_llm(client, request, max_tries=2, backoff=0.01)
    assert time.perf_counter() - start < 2.0


def test_http_auth_header_from_credential_ref(stub_http):
    seen = {}

    @stub_http.route("/chat")
    def _chat(body, headers):
        seen["auth"] = headers.get("Authorization")
        return 200, {"text": "ok"}

    client = HttpLlmClient(stub_http.url, timeout=5.0)
    ref = CredentialRef(value="sk-test-123")
    request = build_llm_request("sys", description(), 0.2, api_key_ref=ref)
    ask_llm(client, request)
    assert seen["auth"] == "Bearer sk-test-123"


# -- the node loop ------------------------------------------------------------------------

def node_bus():
    bus = Bus()
    ensure_topics(bus, TASK_TOPICS)
    return bus


def run_node_async(cfg, client, bus, **kwargs):
    result = {}

    def target():
        result["report"] = run_consultation_node(cfg, client, bus, **kwargs)

    thread = threading.Thread(target=target, daemon=True)
    thread.start()
    return thread, result


def finish(bus):
    bus.publish(TASK_CONTROL_TOPIC, ControlEvent(CAMERA_DONE).to_bytes())


def test_four_descriptions_in_order(mock_cfg):
    bus = node_bus()
    sub = bus.subscribe(GPT_CONSULTATION_TOPIC, queue_size=64)
    thread, result = run_node_async(mock_cfg, default_stub_client(), bus)
    for i in (0, 5, 10, 15):
        bus.publish(IMAGE_DESCRIPTION_TOPIC, description(i).to_bytes())
        time.sleep(0.02)
    finish(bus)
    thread.join(timeout=5.0)
    report = result["report"]
    assert report.descriptions_seen == 4
    assert report.consultations_published == 4
    assert report.errors == 0
    out = [Consultation.from_bytes(env.payload) for env in sub.drain()]
    assert [c.frame_index for c in out] == [0, 5, 10, 15]


def test_zero_descriptions(mock_cfg):
    bus = node_bus()
    thread, result = run_node_async(mock_cfg, default_stub_client(), bus)
    finish(bus)
    thread.join(timeout=5.0)
    report = result["report"]
    assert (report.descriptions_seen, report.consultations_published, report.errors) == (0, 0, 0)


def test_attentive_description_yields_encouragement(mock_cfg):
    bus = node_bus()
    sub = bus.subscribe(GPT_CONSULTATION_TOPIC)
    thread, _ = run_node_async(mock_cfg, default_stub_client(), bus)
    attentive = description(
        3, "The driver is looking straight ahead with both hands on the wheel."
    )
    bus.publish(IMAGE_DESCRIPTION_TOPIC, attentive.to_bytes())
    finish(bus)
    thread.join(timeout=5.0)
    env = sub.get(timeout=1.0)
    consultation = Consultation.from_bytes(env.payload)
    assert consultation.text == "Great job staying focused; keep it up."
    assert consultation.frame_index == 3


def test_duplicate_frame_index_at_most_once(mock_cfg):
    bus = node_bus()
    sub = bus.subscribe(GPT_CONSULTATION_TOPIC, queue_size=16)
    thread, result = run_node_async(mock_cfg, default_stub_client(), bus)
    bus.publish(IMAGE_DESCRIPTION_TOPIC, description(7).to_bytes())
    time.sleep(0.1)
    bus.publish(IMAGE_DESCRIPTION_TOPIC, description(7).to_bytes())
    time.sleep(0.1)
    finish(bus)
    thread.join(timeout=5.0)
    out = [Consultation.from_bytes(env.payload) for env in sub.drain()]
    assert [c.frame_index for c in out] == [7]
    assert result["report"].consultations_published == 1


class FailingClient:
    model_tag = "boom"

    def complete(self, request):
        raise RetryableError("always down")


def test_llm_failure_logged_pipeline_continues(mock_cfg):
    bus = node_bus()
    thread, result = run_node_async(mock_cfg, FailingClient(), bus)
    bus.publish(IMAGE_DESCRIPTION_TOPIC, description(0).to_bytes())
    time.sleep(0.1)
    finish(bus)
    thread.join(timeout=10.0)
    report = result["report"]
    assert report.errors == 1
    assert report.consultations_published == 0


class SlowClient:
    """Blocks until released; lets a backlog build up deterministically."""

    model_tag = "slow"

    def __init__(self):
        self.gate = threading.Event()

    def complete(self, request):
        self.gate.wait(timeout=5.0)
        return f"echo: {request.user_text}"


def test_backlog_processes_latest_only(mock_cfg):
    bus = node_bus()
    sub = bus.subscribe(GPT_CONSULTATION_TOPIC, queue_size=16)
    client = SlowClient()
    thread, result = run_node_async(mock_cfg, client, bus)
    bus.publish(IMAGE_DESCRIPTION_TOPIC, description(0, "first").to_bytes())
    time.sleep(0.2)  # node is now blocked inside the LLM call for frame 0
    for i in (1, 2, 3):
        bus.publish(IMAGE_DESCRIPTION_TOPIC, description(i, f"desc {i}").to_bytes())
    client.gate.set()
    time.sleep(0.3)
    finish(bus)
    thread.join(timeout=5.0)
    report = result["report"]
    out = [Consultation.from_bytes(env.payload) for env in sub.drain()]
    # Frame 0 was in flight; of the backlog (1, 2, 3) only the newest runs.
    assert [c.frame_index for c in out] == [0, 3]
    assert report.descriptions_seen == 4
    assert report.descriptions_dropped == 2
    assert report.consultations_published == 2


def test_empty_description_skipped_silently(mock_cfg):
    bus = node_bus()
    sub = bus.subscribe(GPT_CONSULTATION_TOPIC)
    thread, result = run_node_async(mock_cfg, default_stub_client(), bus)
    bus.publish(IMAGE_DESCRIPTION_TOPIC, description(0, "").to_bytes())
    time.sleep(0.1)
    finish(bus)
    thread.join(timeout=5.0)
    assert result["report"].consultations_published == 0
    assert result["report"].errors == 0
    assert sub.try_get() is None


# -- sinks -----------------------------------------------------------------------------------

def test_console_sink_prints(capsys):
    sink = ConsoleSink()
    sink.emit(Consultation(4, "watch the road", "stub", 0.2, 0.01))
    out = capsys.readouterr().out
    assert "frame 4" in out and "watch the road" in out


def test_jsonl_sink_appends(tmp_path):
    path = tmp_path / "notify.jsonl"
    sink = JsonlSink(path)
    sink.emit(Consultation(1, "a", "stub", 0.2, 0.0))
    sink.emit(Consultation(2, "b", "stub", 0.2, 0.0))
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert Consultation.from_bytes(lines[1].encode()).text == "b"


def test_api_key_from_environment(monkeypatch):
    monkeypatch.setenv("ROSGPT_API_KEY", "sk-env-key")
    assert CredentialRef().resolve() == "sk-env-key"
    monkeypatch.delenv("ROSGPT_API_KEY")
    assert CredentialRef().resolve() is None
