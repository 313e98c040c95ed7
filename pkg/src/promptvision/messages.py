"""Payload types for the two pipeline topics, plus topic-name constants.

Payloads travel over the bus as UTF-8 JSON bytes with a fixed key order so
that identical inputs always serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional

IMAGE_DESCRIPTION_TOPIC = "Image_Description"
GPT_CONSULTATION_TOPIC = "GPT_Consultation"
TASK_CONTROL_TOPIC = "task_control"

TASK_TOPICS = (
    (IMAGE_DESCRIPTION_TOPIC, 16),
    (GPT_CONSULTATION_TOPIC, 16),
    (TASK_CONTROL_TOPIC, 8),
)


def prompt_digest(prompt: str) -> int:
    """Stable 64-bit digest of a prompt string (same on every platform)."""
    raw = hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(raw, "big")


@dataclass(frozen=True)
class ImageDescription:
    """One frame's natural-language description, published by the camera node."""

    task_name: str
    frame_index: int
    capture_time: float
    text: str
    backend_id: str
    vision_prompt_digest: int

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "task_name": self.task_name,
                "frame_index": self.frame_index,
                "capture_time": self.capture_time,
                "text": self.text,
                "backend_id": self.backend_id,
                "vision_prompt_digest": self.vision_prompt_digest,
            },
            ensure_ascii=False,
        ).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ImageDescription":
        obj = json.loads(raw.decode("utf-8"))
        return cls(
            task_name=obj["task_name"],
            frame_index=int(obj["frame_index"]),
            capture_time=float(obj["capture_time"]),
            text=obj["text"],
            backend_id=obj["backend_id"],
            vision_prompt_digest=int(obj["vision_prompt_digest"]),
        )


@dataclass(frozen=True)
class Consultation:
    """Task feedback published downstream for one described frame."""

    frame_index: int
    text: str
    model_tag: str
    temperature: float
    elapsed: float

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "frame_index": self.frame_index,
                "text": self.text,
                "model_tag": self.model_tag,
                "temperature": self.temperature,
                "elapsed": self.elapsed,
            },
            ensure_ascii=False,
        ).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Consultation":
        obj = json.loads(raw.decode("utf-8"))
        return cls(
            frame_index=int(obj["frame_index"]),
            text=obj["text"],
            model_tag=obj["model_tag"],
            temperature=float(obj["temperature"]),
            elapsed=float(obj["elapsed"]),
        )


@dataclass(frozen=True)
class ControlEvent:
    """Lifecycle signal on the task_control topic (e.g. camera_done)."""

    event: str
    detail: Optional[dict] = None

    def to_bytes(self) -> bytes:
        body = {"event": self.event}
        if self.detail:
            body["detail"] = self.detail
        return json.dumps(body, ensure_ascii=False).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ControlEvent":
        obj = json.loads(raw.decode("utf-8"))
        return cls(event=obj["event"], detail=obj.get("detail"))


CAMERA_DONE = "camera_done"
