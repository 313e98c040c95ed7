"""Consultation node: turn each image description into task feedback.

The LLM request keeps the two texts in separate roles rather than
concatenating them: the task file's llm_prompt verbatim as the system
text, the description verbatim as the user text. The remote contract is

    POST {endpoint}/chat {"system": str, "user": str, "temperature": float}
        -> {"text": str}

and a scripted stub client serves offline runs, keyed by substrings of the
incoming description.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import requests

from .bus import ensure_topics
from .messages import (
    CAMERA_DONE,
    GPT_CONSULTATION_TOPIC,
    IMAGE_DESCRIPTION_TOPIC,
    TASK_CONTROL_TOPIC,
    TASK_TOPICS,
    Consultation,
    ControlEvent,
    ImageDescription,
)
from .semantics import BackendTimeout

log = logging.getLogger(__name__)

API_KEY_ENV_VAR = "ROSGPT_API_KEY"
DEFAULT_MAX_TRIES = 3
DEFAULT_BACKOFF = 0.2


class LlmError(Exception):
    pass


class CredentialError(LlmError):
    """Authentication was rejected; retrying cannot help."""


class RetryableError(LlmError):
    """Rate limit or transient server failure; retried with backoff."""


class SkipSignal(Exception):
    """Raised when a description is empty: no request is issued for it."""


class CredentialRef:
    """Opaque handle to a secret; the value never appears in reprs or logs."""

    def __init__(self, env_var: str = API_KEY_ENV_VAR, value: Optional[str] = None):
        self.env_var = env_var
        self._value = value

    def resolve(self) -> Optional[str]:
        if self._value is not None:
            return self._value
        return os.environ.get(self.env_var)

    def __repr__(self) -> str:
        return f"CredentialRef(env_var={self.env_var!r})"


@dataclass(frozen=True)
class LlmRequest:
    system_text: str
    user_text: str
    temperature: float
    api_key_ref: CredentialRef = field(default_factory=CredentialRef, compare=False)


def build_llm_request(
    llm_prompt: str,
    description: ImageDescription,
    temperature: float,
    api_key_ref: Optional[CredentialRef] = None,
) -> LlmRequest:
    """Compose the two-role request; empty descriptions raise SkipSignal."""
    if not description.text:
        raise SkipSignal(f"empty description for frame {description.frame_index}")
    if not llm_prompt:
        raise ValueError("llm prompt must be non-empty")
    if not (0.0 <= temperature <= 2.0):
        raise ValueError(f"temperature {temperature} outside [0, 2]")
    return LlmRequest(
        system_text=llm_prompt,
        user_text=description.text,
        temperature=temperature,
        api_key_ref=api_key_ref or CredentialRef(),
    )


# -- clients -------------------------------------------------------------------

class HttpLlmClient:
    """Chat client for the minimal JSON contract above."""

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.model_tag = "llm"
        self._session = session or requests.Session()

    def complete(self, request: LlmRequest) -> str:
        headers = {}
        key = request.api_key_ref.resolve()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = self._session.post(
                self.endpoint + "/chat",
                json={
                    "system": request.system_text,
                    "user": request.user_text,
                    "temperature": request.temperature,
                },
                headers=headers,
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise BackendTimeout(f"{self.endpoint}/chat timed out") from exc
        except requests.RequestException as exc:
            raise RetryableError(f"{self.endpoint}/chat unreachable: {exc}") from exc
        if resp.status_code in (401, 403):
            raise CredentialError(f"LLM endpoint rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableError(f"LLM endpoint returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise LlmError(f"LLM endpoint returned HTTP {resp.status_code}")
        try:
            body = resp.json()
            text = body["text"]
        except (ValueError, KeyError) as exc:
            raise LlmError("LLM reply has no text") from exc
        if not isinstance(text, str) or not text:
            raise LlmError("LLM reply text is empty")
        if isinstance(body.get("model"), str):
            self.model_tag = body["model"]
        return text


class ScriptedLlmClient:
    """Offline stand-in: first script key found in the description wins."""

    model_tag = "stub"

    def __init__(self, rules: Sequence[tuple[str, str]], default: str):
        self.rules = list(rules)
        self.default = default

    def complete(self, request: LlmRequest) -> str:
        haystack = request.user_text.lower()
        for key, reply in self.rules:
            if key.lower() in haystack:
                return reply
        return self.default


DEFAULT_STUB_RULES = [
    ("phone", "Please put down your phone and focus on the road."),
    ("mobile", "Please put down your phone and focus on the road."),
    ("both hands on the wheel", "Great job staying focused; keep it up."),
    ("focused on the road", "Great job staying focused; keep it up."),
    ("coffee", "Please set your drink down and keep both hands on the wheel."),
    ("cup", "Please set your drink down and keep both hands on the wheel."),
    ("looking down", "Eyes up, please; keep your attention on the road ahead."),
    ("passenger", "Please face forward and keep your eyes on the road."),
    ("radio", "Adjust the radio only when it is safe to do so."),
    ("closed", "Pull over and rest; you appear to be falling asleep."),
    ("cigarette", "Please keep both hands free for driving."),
]
DEFAULT_STUB_FALLBACK = "Drive carefully and stay attentive."


def default_stub_client() -> ScriptedLlmClient:
    return ScriptedLlmClient(DEFAULT_STUB_RULES, DEFAULT_STUB_FALLBACK)


def load_stub_client(path) -> ScriptedLlmClient:
    """Load a keyed stub script: ``key<TAB>reply`` lines, ``*`` for default."""
    rules: list[tuple[str, str]] = []
    default = DEFAULT_STUB_FALLBACK
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, reply = line.partition("\t")
        if not sep:
            continue
        key, reply = key.strip(), reply.strip()
        if key == "*":
            default = reply
        else:
            rules.append((key, reply))
    return ScriptedLlmClient(rules, default)


# -- the ask operation ---------------------------------------------------------

def ask_llm(
    client,
    request: LlmRequest,
    max_tries: int = DEFAULT_MAX_TRIES,
    backoff: float = DEFAULT_BACKOFF,
) -> str:
    """Ask for the first completion, retrying transient failures.

    Rate limits and timeouts are retried with exponential backoff up to
    ``max_tries`` attempts; credential rejections are raised immediately.
    """
    delay = backoff
    for attempt in range(1, max_tries + 1):
        try:
            return client.complete(request)
        except CredentialError:
            raise
        except (RetryableError, BackendTimeout):
            if attempt == max_tries:
                raise
            time.sleep(delay)
            delay *= 2
    raise RetryableError("unreachable")  # pragma: no cover


# -- notification sinks ----------------------------------------------------------

class ConsoleSink:
    """Prints each consultation; the stand-in for vocal notifications."""

    def __init__(self, stream=None):
        self._stream = stream

    def emit(self, consultation: Consultation) -> None:
        import sys

        stream = self._stream or sys.stdout
        print(
            f"[consultation] frame {consultation.frame_index}: {consultation.text}",
            file=stream,
        )


class JsonlSink:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def emit(self, consultation: Consultation) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(consultation.to_bytes().decode("utf-8"))
            handle.write("\n")


# -- the node --------------------------------------------------------------------

@dataclass
class ConsultationReport:
    descriptions_seen: int = 0
    consultations_published: int = 0
    errors: int = 0
    descriptions_dropped: int = 0

    def summary(self) -> str:
        return (
            f"descriptions_seen={self.descriptions_seen} "
            f"consultations_published={self.consultations_published} "
            f"errors={self.errors} "
            f"descriptions_dropped={self.descriptions_dropped}"
        )


def run_consultation_node(
    cfg,
    client,
    bus,
    sinks: Sequence = (),
    poll: float = 0.05,
    api_key_ref: Optional[CredentialRef] = None,
) -> ConsultationReport:
    """Consume descriptions until the camera signals completion.

    At most one consultation is published per received description, carrying
    the same frame index. Descriptions that arrive while an LLM call is in
    flight are the backlog case: when more than one piles up during a call,
    only the newest is processed and the intermediates are dropped and
    counted, since a stale driving alert is worse than none. A batch that is
    already waiting while the node is idle (e.g. fed from a replay) is
    processed in order, since nothing was ever the bottleneck for it.
    """
    from collections import deque

    ensure_topics(bus, TASK_TOPICS)
    desc_sub = bus.subscribe(IMAGE_DESCRIPTION_TOPIC)
    ctrl_sub = bus.subscribe(TASK_CONTROL_TOPIC)
    report = ConsultationReport()
    done_seen = False
    published_frames: set[int] = set()
    llm_prompt = cfg.consultation.llm_prompt
    temperature = cfg.consultation.gpt_temperature
    buffer: deque = deque()

    def take_all_pending() -> int:
        moved = 0
        for pending in desc_sub.drain():
            buffer.append(pending)
            moved += 1
        return moved

    try:
        while True:
            if not buffer:
                envelope = desc_sub.get(timeout=poll)
                if envelope is None:
                    if not done_seen:
                        ctrl = ctrl_sub.try_get()
                        if ctrl is not None and _is_camera_done(ctrl):
                            done_seen = True
                    if done_seen and desc_sub.pending() == 0:
                        break
                    if desc_sub.closed:
                        break
                    continue
                buffer.append(envelope)
                report.descriptions_seen += 1 + take_all_pending()

            _handle_description(
                buffer.popleft(), cfg, client, bus, sinks, report,
                published_frames, llm_prompt, temperature, api_key_ref,
            )
            # Anything that queued up during that call is backlog: keep only
            # the newest when there is more than one.
            arrived_during = desc_sub.drain()
            report.descriptions_seen += len(arrived_during)
            if len(arrived_during) > 1:
                report.descriptions_dropped += len(arrived_during) - 1
                arrived_during = arrived_during[-1:]
            buffer.extend(arrived_during)
    finally:
        desc_sub.close()
        ctrl_sub.close()
    return report


def _is_camera_done(envelope) -> bool:
    try:
        return ControlEvent.from_bytes(envelope.payload).event == CAMERA_DONE
    except (ValueError, KeyError):
        return False


def _handle_description(
    envelope, cfg, client, bus, sinks, report,
    published_frames, llm_prompt, temperature, api_key_ref,
) -> None:
    try:
        description = ImageDescription.from_bytes(envelope.payload)
    except (ValueError, KeyError) as exc:
        report.errors += 1
        log.warning("unparseable description payload: %s", exc)
        return
    if description.frame_index in published_frames:
        log.warning("duplicate description for frame %d ignored", description.frame_index)
        return
    try:
        request = build_llm_request(llm_prompt, description, temperature, api_key_ref)
    except SkipSignal:
        return
    start = time.perf_counter()
    try:
        text = ask_llm(client, request)
    except (LlmError, BackendTimeout) as exc:
        report.errors += 1
        log.warning("LLM call failed for frame %d: %s", description.frame_index, exc)
        return
    consultation = Consultation(
        frame_index=description.frame_index,
        text=text,
        model_tag=getattr(client, "model_tag", "llm"),
        temperature=temperature,
        elapsed=time.perf_counter() - start,
    )
    bus.publish(GPT_CONSULTATION_TOPIC, consultation.to_bytes())
    published_frames.add(description.frame_index)
    report.consultations_published += 1
    for sink in sinks:
        try:
            sink.emit(consultation)
        except Exception as exc:  # sinks must never kill the node
            log.warning("notification sink failed: %s", exc)
