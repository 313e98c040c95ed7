"""Pluggable image-description backends behind one describe() contract.

A backend turns (frame, vision prompt) into one natural-language sentence
or paragraph. Remote backends speak a minimal JSON-over-HTTP contract:

    POST {endpoint}/describe
        {"prompt": str, "image_b64": str, "image_format": str,
         "temperature": float, "model": str}            -> {"text": str}
    POST {endpoint}/segment
        {"prompt": str, "image_b64": str, "image_format": str}
        -> {"masks": [{"area_fraction": float, "bbox": [..]?, "label": str?}]}

The scripted mock keys its replies off the frame label so that whole-pipeline
runs are deterministic with no model anywhere near the test machine.
"""

from __future__ import annotations

import base64
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional

import requests

from .config import ConfigError, TaskConfig

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 1
ENDPOINT_ENV_VAR = "ROSGPT_BACKEND_URL"

BACKEND_LLAVA = "llava"
BACKEND_MINIGPT4 = "minigpt4"
BACKEND_SAM = "sam"
BACKEND_MOCK = "mock"

# Config-file method spelling -> backend id.
METHOD_TO_BACKEND = {
    "llava": BACKEND_LLAVA,
    "MiniGPT4": BACKEND_MINIGPT4,
    "SAM": BACKEND_SAM,
    "mock": BACKEND_MOCK,
}


class BackendError(Exception):
    pass


class BackendTimeout(BackendError):
    """The backend did not answer within the configured timeout."""


class BackendProtocolError(BackendError):
    """The backend answered, but not with a usable body."""


class BackendUnavailable(BackendError):
    """All attempts failed; the backend cannot be reached at all."""


@dataclass(frozen=True)
class MockScript:
    """Total label -> description function (via the default entry)."""

    table: Mapping[str, str]
    default: str

    def lookup(self, label: Optional[str]) -> str:
        if label is not None and label in self.table:
            return self.table[label]
        return self.default


@dataclass(frozen=True)
class BackendSpec:
    id: str
    endpoint: Optional[str] = None
    params: Mapping[str, object] = field(default_factory=dict)
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES
    script: Optional[MockScript] = None

    def __post_init__(self):
        if self.id == BACKEND_MOCK:
            if self.script is None:
                raise ConfigError("mock backend requires a script table")
        elif not self.endpoint:
            raise ConfigError(f"backend {self.id!r} requires an endpoint")


@dataclass(frozen=True)
class DescribeRequest:
    backend_id: str
    vision_prompt: str
    image: bytes
    image_format: str
    temperature: float


@dataclass(frozen=True)
class DescribeResponse:
    text: str
    latency: float
    model_tag: str


@dataclass(frozen=True)
class MaskSummary:
    """What the segmentation route reports: mask count plus per-mask stats."""

    mask_count: int
    area_fractions: tuple[float, ...]
    labels: tuple[Optional[str], ...]


def render_mask_summary(summary: MaskSummary) -> str:
    """One-sentence rendering used when segmentation feeds the description topic."""
    noun = "region" if summary.mask_count == 1 else "regions"
    largest = max(summary.area_fractions)
    return (
        f"{summary.mask_count} {noun} detected; "
        f"largest covers {round(largest * 100)}% of frame"
    )


# -- backends ----------------------------------------------------------------

class MockBackend:
    """Deterministic scripted stand-in: describes frames by their label."""

    def __init__(self, spec: BackendSpec):
        if spec.id != BACKEND_MOCK:
            raise ValueError(f"not a mock spec: {spec.id}")
        self.spec = spec

    def describe(self, frame, vision_prompt: str) -> DescribeResponse:
        if not vision_prompt:
            raise ValueError("vision prompt must be non-empty")
        start = time.perf_counter()
        text = self.spec.script.lookup(getattr(frame, "label", None))
        return DescribeResponse(
            text=text,
            latency=time.perf_counter() - start,
            model_tag=BACKEND_MOCK,
        )


class HttpVisionBackend:
    """Client for a describe-capable model server (llava / minigpt4 style)."""

    def __init__(self, spec: BackendSpec, session: Optional[requests.Session] = None):
        self.spec = spec
        self._session = session or requests.Session()

    def describe(self, frame, vision_prompt: str) -> DescribeResponse:
        if not vision_prompt:
            raise ValueError("vision prompt must be non-empty")
        body = {
            "prompt": vision_prompt,
            "image_b64": base64.b64encode(frame.data).decode("ascii"),
            "image_format": str(getattr(frame.format, "value", frame.format)),
            "temperature": float(self.spec.params.get("temperature", 0.0)),
            "model": self.spec.id,
        }
        start = time.perf_counter()
        reply = self._post("/describe", body)
        text = reply.get("text")
        if not isinstance(text, str) or not text:
            raise BackendProtocolError("describe reply has no text")
        return DescribeResponse(
            text=text,
            latency=time.perf_counter() - start,
            model_tag=str(reply.get("model", self.spec.id)),
        )

    def _post(self, route: str, body: dict) -> dict:
        url = self.spec.endpoint.rstrip("/") + route
        attempts = self.spec.retries + 1
        timeouts = 0
        last_exc: Optional[Exception] = None
        for _ in range(attempts):
            try:
                resp = self._session.post(url, json=body, timeout=self.spec.timeout)
            except requests.Timeout as exc:
                timeouts += 1
                last_exc = exc
                continue
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                raise BackendProtocolError(f"{url} returned HTTP {resp.status_code}")
            try:
                reply = resp.json()
            except ValueError as exc:
                raise BackendProtocolError(f"{url} returned non-JSON body") from exc
            if not isinstance(reply, dict):
                raise BackendProtocolError(f"{url} returned non-object body")
            return reply
        if timeouts == attempts:
            raise BackendTimeout(f"{url}: no reply within {self.spec.timeout}s "
                                 f"x{attempts} attempts") from last_exc
        raise BackendUnavailable(f"{url}: {last_exc}") from last_exc


class SamBackend(HttpVisionBackend):
    """Segmentation backend; describe() renders the mask summary to text."""

    def segment(self, frame, prompt: str) -> MaskSummary:
        if self.spec.id != BACKEND_SAM:
            raise ValueError(f"segment requires a sam backend, got {self.spec.id!r}")
        body = {
            "prompt": prompt,
            "image_b64": base64.b64encode(frame.data).decode("ascii"),
            "image_format": str(getattr(frame.format, "value", frame.format)),
        }
        reply = self._post("/segment", body)
        masks = reply.get("masks")
        if not isinstance(masks, list):
            raise BackendProtocolError("segment reply has no mask list")
        if len(masks) < 1:
            # A valid segmentation yields a mask for at least one object.
            raise BackendProtocolError("segment reply contains zero masks")
        try:
            fractions = tuple(float(m["area_fraction"]) for m in masks)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendProtocolError(f"bad mask entry: {exc}") from exc
        labels = tuple(m.get("label") for m in masks)
        return MaskSummary(
            mask_count=len(masks), area_fractions=fractions, labels=labels
        )

    def describe(self, frame, vision_prompt: str) -> DescribeResponse:
        start = time.perf_counter()
        summary = self.segment(frame, vision_prompt)
        return DescribeResponse(
            text=render_mask_summary(summary),
            latency=time.perf_counter() - start,
            model_tag=BACKEND_SAM,
        )


BACKEND_CLASSES = {
    BACKEND_LLAVA: HttpVisionBackend,
    BACKEND_MINIGPT4: HttpVisionBackend,
    BACKEND_SAM: SamBackend,
    BACKEND_MOCK: MockBackend,
}


def check_registry() -> None:
    """Every method the config schema accepts must map to an implementation."""
    missing = [m for m, b in METHOD_TO_BACKEND.items() if b not in BACKEND_CLASSES]
    if missing:
        raise ConfigError(f"backends without implementation: {missing}")


# -- wiring from a task config -------------------------------------------------

def build_backend(
    cfg: TaskConfig,
    endpoint: Optional[str] = None,
    script: Optional[MockScript] = None,
    timeout: float = DEFAULT_TIMEOUT,
    retries: int = DEFAULT_RETRIES,
) -> BackendSpec:
    """Populate a BackendSpec from the config's matching parameter block.

    ``endpoint`` (or ROSGPT_BACKEND_URL) overrides the target URL; ``script``
    supplies the mock's table (defaults to the shipped one).
    """
    method = cfg.camera.image_description_method
    backend_id = METHOD_TO_BACKEND.get(method)
    if backend_id is None:
        raise ConfigError(f"unknown description method {method!r}")

    endpoint = endpoint or os.environ.get(ENDPOINT_ENV_VAR)

    if backend_id == BACKEND_MOCK:
        return BackendSpec(
            id=backend_id,
            script=script or default_mock_script(),
            timeout=timeout,
            retries=retries,
        )

    params: dict[str, object]
    if backend_id == BACKEND_LLAVA:
        if cfg.llava is None:
            raise ConfigError("method 'llava' needs the llava_parameters block")
        params = {
            "temperature": cfg.llava.temperature,
            "llama_version": cfg.llava.llama_version,
        }
    elif backend_id == BACKEND_MINIGPT4:
        if cfg.minigpt4 is None:
            raise ConfigError("method 'MiniGPT4' needs the MiniGPT4_parameters block")
        params = {
            "temperature": cfg.minigpt4.temperature,
            "configuration": cfg.minigpt4.configuration,
        }
    else:  # sam
        if cfg.sam is None:
            raise ConfigError("method 'SAM' needs the SAM_parameters block")
        params = {"weights": cfg.sam.weights}

    return BackendSpec(
        id=backend_id,
        endpoint=endpoint or "http://127.0.0.1:8080",
        params=params,
        timeout=timeout,
        retries=retries,
    )


def open_backend(spec: BackendSpec):
    check_registry()
    return BACKEND_CLASSES[spec.id](spec)


def describe(backend, frame, vision_prompt: str) -> DescribeResponse:
    """Uniform entry point over any backend client."""
    return backend.describe(frame, vision_prompt)


# -- shipped mock script -------------------------------------------------------

# Keyed by frame label; the driver-monitoring fixtures and the ten scenario
# cases all resolve through this table.
DEFAULT_MOCK_TABLE = {
    "phone": "The driver is holding a phone to their ear and looking away from the road.",
    "attentive": "The driver is looking straight ahead with both hands on the wheel.",
    "Drinking Coffee during driving": (
        "The driver is sipping from a coffee cup with only one hand on the wheel."
    ),
    "Focus on the road during driving": (
        "The driver is fully focused on the road with both hands on the wheel."
    ),
    "holding a cup during driving": (
        "The driver is holding a cup in one hand while steering with the other."
    ),
    "looking down during driving": (
        "The driver is looking down toward their lap instead of at the road."
    ),
    "looking to passenger during driving": (
        "The driver has turned their head to talk to the passenger."
    ),
    "using radio during driving": (
        "The driver is reaching toward the radio controls with their eyes off the road."
    ),
    "using mobile during driving": (
        "The driver is looking at a mobile phone held above the steering wheel."
    ),
    "sleeping during driving": (
        "The driver's eyes are closed and their head is slumped forward."
    ),
    "smoking during driving": (
        "The driver is holding a lit cigarette near the window with one hand."
    ),
    "speaking in mobile during driving": (
        "The driver is speaking on a mobile phone pressed to their ear."
    ),
}

DEFAULT_MOCK_FALLBACK = "A person is seated in the driver's seat of a car."


def default_mock_script() -> MockScript:
    return MockScript(table=dict(DEFAULT_MOCK_TABLE), default=DEFAULT_MOCK_FALLBACK)
