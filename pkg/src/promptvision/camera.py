"""Camera node: acquire frames, sample every f-th one (or on a time
interval), describe each sample through the vision backend, publish the
description, and collect the consultations that come back.

The sampling counter increments on every frame read from the source, and a
frame is sampled when ``counter % f == 0``, so a 20-frame source at f=5
samples indices 0, 5, 10 and 15. Finite sources (frame directories,
bounded synthetic streams) carry a deterministic capture clock, which makes
a whole mock-backed run a pure function of (fixture, policy).
"""

from __future__ import annotations

import io
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

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
    prompt_digest,
)
from .semantics import BackendError

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")
LABELS_FILENAME = "labels.tsv"


class SourceError(Exception):
    """The frame source cannot be opened or read at all."""


class LogError(Exception):
    """Session log could not be written (non-fatal to the pipeline)."""


class FrameFormat(str, Enum):
    RGB8 = "rgb8"
    PNG = "png_bytes"
    JPEG = "jpeg_bytes"


@dataclass(frozen=True)
class Frame:
    index: int
    capture_time: float
    width: int
    height: int
    format: FrameFormat
    data: bytes
    source_id: str
    label: Optional[str] = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("frame dimensions must be positive")
        if self.format is FrameFormat.RGB8 and len(self.data) != self.width * self.height * 3:
            raise ValueError(
                f"rgb8 payload is {len(self.data)} bytes, "
                f"expected {self.width * self.height * 3}"
            )


class SamplingMode(str, Enum):
    EVERY_F_FRAMES = "every_f_frames"
    EVERY_T_SECONDS = "every_t_seconds"


@dataclass(frozen=True)
class SamplingPolicy:
    mode: SamplingMode = SamplingMode.EVERY_F_FRAMES
    f: int = 1
    t: float = 1.0

    def __post_init__(self):
        if self.f < 1:
            raise ValueError("frame interval f must be >= 1")
        if self.t <= 0:
            raise ValueError("time interval t must be > 0")

    @classmethod
    def every_frames(cls, f: int) -> "SamplingPolicy":
        return cls(mode=SamplingMode.EVERY_F_FRAMES, f=f)

    @classmethod
    def every_seconds(cls, t: float) -> "SamplingPolicy":
        return cls(mode=SamplingMode.EVERY_T_SECONDS, t=t)


def should_sample(
    counter: int,
    policy: SamplingPolicy,
    now: Optional[float] = None,
    last_sample_time: Optional[float] = None,
) -> bool:
    """Sampling rule. ``counter`` counts every frame read so far (0-based)."""
    if policy.mode is SamplingMode.EVERY_F_FRAMES:
        return counter % policy.f == 0
    if last_sample_time is None:
        return True
    if now is None:
        raise ValueError("time-based sampling needs the current timestamp")
    return (now - last_sample_time) >= policy.t


# -- frame sources -------------------------------------------------------------

class FrameDirectorySource:
    """Finite source over a directory of image files.

    Lexicographic filename order defines stream order; each file's position
    in that order is its frame index, consumed even when the file turns out
    to be unreadable. An optional labels.tsv (filename TAB label) attaches
    labels for the mock backend.
    """

    kind = "frames"

    def __init__(self, path, fps: float = 1.0):
        self.path = Path(path)
        if not self.path.is_dir():
            raise SourceError(f"not a frame directory: {self.path}")
        if fps <= 0:
            raise ValueError("fps must be positive")
        self.fps = fps
        self._files = sorted(
            p for p in self.path.iterdir()
            if p.suffix.lower() in FRAME_SUFFIXES and p.is_file()
        )
        self._labels = _load_labels(self.path / LABELS_FILENAME)
        self._pos = 0
        self.exhausted = False

    def read(self) -> Optional[Frame]:
        while self._pos < len(self._files):
            file = self._files[self._pos]
            index = self._pos
            self._pos += 1
            try:
                data = file.read_bytes()
                width, height, fmt = _probe_image(data, file.suffix.lower())
            except (OSError, ValueError) as exc:
                log.warning("skipping unreadable frame %s: %s", file.name, exc)
                continue
            return Frame(
                index=index,
                capture_time=index / self.fps,
                width=width,
                height=height,
                format=fmt,
                data=data,
                source_id=file.name,
                label=self._labels.get(file.name),
            )
        self.exhausted = True
        return None

    def close(self) -> None:
        pass


class SyntheticSource:
    """Deterministic generated frames; infinite when count is None.

    Stands in for a live webcam (never exhausted) and backs the scenario
    fixtures: the label sequence cycles over ``labels``.
    """

    kind = "webcam"

    def __init__(
        self,
        count: Optional[int] = None,
        labels: Optional[list[str]] = None,
        fps: float = 1.0,
        width: int = 32,
        height: int = 24,
    ):
        if fps <= 0:
            raise ValueError("fps must be positive")
        self.count = count
        self.labels = labels or []
        self.fps = fps
        self.width = width
        self.height = height
        self._pos = 0
        self.exhausted = False

    def read(self) -> Optional[Frame]:
        if self.count is not None and self._pos >= self.count:
            self.exhausted = True
            return None
        index = self._pos
        self._pos += 1
        label = self.labels[index % len(self.labels)] if self.labels else None
        return Frame(
            index=index,
            capture_time=index / self.fps,
            width=self.width,
            height=self.height,
            format=FrameFormat.RGB8,
            data=synthetic_pixels(index, self.width, self.height),
            source_id=f"synthetic:{index:06d}",
            label=label,
        )

    def close(self) -> None:
        pass


def synthetic_pixels(index: int, width: int, height: int) -> bytes:
    """Flat rgb8 buffer whose bytes depend only on the frame index."""
    base = (index * 37) % 251
    row = bytes(((base + c) % 256) for c in range(width * 3))
    return row * height


def _load_labels(path: Path) -> dict[str, str]:
    labels: dict[str, str] = {}
    if not path.is_file():
        return labels
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, _, label = line.partition("\t")
        if label:
            labels[name.strip()] = label.strip()
    return labels


def _probe_image(data: bytes, suffix: str) -> tuple[int, int, FrameFormat]:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as img:
        width, height = img.size
    fmt = FrameFormat.PNG if suffix == ".png" else FrameFormat.JPEG
    return width, height, fmt


def open_frame_source(kind: str, location: Optional[str], fps: float = 1.0):
    """Map a config input kind onto a source implementation."""
    if kind == "frames":
        if not location:
            raise SourceError("frames input needs a directory path")
        return FrameDirectorySource(location, fps=fps)
    if kind == "webcam":
        # No live-device adapter ships; the deterministic generator stands in.
        log.warning("webcam input is served by the synthetic frame generator")
        return SyntheticSource(count=None, fps=fps)
    if kind == "video":
        raise SourceError(
            "video decoding is not supported; extract frames to a directory "
            "and use Choose_input: frames"
        )
    raise SourceError(f"unknown input kind {kind!r}")


def next_frame(source) -> Optional[Frame]:
    """Pull the next frame in stream order; None when a finite source ends."""
    return source.read()


# -- the node ------------------------------------------------------------------

@dataclass
class SessionEntry:
    frame_index: int
    capture_time: float
    description: str
    backend_id: str
    consultation: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame_index": self.frame_index,
                "capture_time": self.capture_time,
                "description": self.description,
                "consultation": self.consultation,
                "backend_id": self.backend_id,
            },
            ensure_ascii=False,
        )


@dataclass
class CameraReport:
    frames_read: int = 0
    frames_sampled: int = 0
    descriptions_published: int = 0
    describe_errors: int = 0
    entries: list[SessionEntry] = field(default_factory=list)

    def summary(self) -> str:
        return (
            f"frames_read={self.frames_read} "
            f"frames_sampled={self.frames_sampled} "
            f"descriptions_published={self.descriptions_published} "
            f"describe_errors={self.describe_errors}"
        )


def run_camera_node(
    cfg,
    source,
    backend,
    bus,
    policy: SamplingPolicy = SamplingPolicy(),
    frame_budget: Optional[int] = None,
    consult_wait: float = 5.0,
) -> CameraReport:
    """Run the camera loop until the source ends or the budget runs out.

    Per sampled frame exactly one description is published (unless the
    backend fails, which is logged and counted). After publishing, the loop
    waits up to ``consult_wait`` seconds for the matching consultation so a
    responsive downstream node is never outrun; on timeout the entry keeps a
    null consultation and the loop moves on.
    """
    ensure_topics(bus, TASK_TOPICS)
    consult_sub = bus.subscribe(GPT_CONSULTATION_TOPIC)
    report = CameraReport()
    vision_prompt = cfg.camera.vision_prompt
    digest = prompt_digest(vision_prompt)
    backend_id = getattr(backend, "spec", None)
    backend_id = backend_id.id if backend_id is not None else type(backend).__name__

    counter = 0
    last_sample_time: Optional[float] = None
    try:
        while True:
            if frame_budget is not None and report.frames_read >= frame_budget:
                break
            frame = next_frame(source)
            if frame is None:
                break
            report.frames_read += 1
            if should_sample(counter, policy, frame.capture_time, last_sample_time):
                report.frames_sampled += 1
                last_sample_time = frame.capture_time
                try:
                    response = backend.describe(frame, vision_prompt)
                except BackendError as exc:
                    report.describe_errors += 1
                    log.warning("describe failed for frame %d: %s", frame.index, exc)
                else:
                    description = ImageDescription(
                        task_name=cfg.task_name,
                        frame_index=frame.index,
                        capture_time=frame.capture_time,
                        text=response.text,
                        backend_id=backend_id,
                        vision_prompt_digest=digest,
                    )
                    bus.publish(IMAGE_DESCRIPTION_TOPIC, description.to_bytes())
                    report.descriptions_published += 1
                    report.entries.append(
                        SessionEntry(
                            frame_index=frame.index,
                            capture_time=frame.capture_time,
                            description=response.text,
                            backend_id=backend_id,
                        )
                    )
                    _await_consultation(consult_sub, report.entries, frame.index, consult_wait)
            counter += 1
    finally:
        _collect_consultations(consult_sub, report.entries)
        bus.publish(
            TASK_CONTROL_TOPIC,
            ControlEvent(CAMERA_DONE, {"frames_read": report.frames_read}).to_bytes(),
        )
        consult_sub.close()
    return report


def _await_consultation(sub, entries, frame_index: int, wait: float) -> None:
    if wait <= 0:
        _collect_consultations(sub, entries)
        return
    deadline = time.monotonic() + wait
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return
        envelope = sub.get(timeout=remaining)
        if envelope is None:
            return
        if _attach(entries, envelope) == frame_index:
            return


def _collect_consultations(sub, entries) -> None:
    for envelope in sub.drain():
        _attach(entries, envelope)


def _attach(entries, envelope) -> Optional[int]:
    try:
        consultation = Consultation.from_bytes(envelope.payload)
    except (ValueError, KeyError) as exc:
        log.warning("unparseable consultation payload: %s", exc)
        return None
    for entry in entries:
        if entry.frame_index == consultation.frame_index and entry.consultation is None:
            entry.consultation = consultation.text
            break
    return consultation.frame_index


def write_session_log(path, entries) -> None:
    """Write one JSONL record per sampled frame; empty runs yield an empty file."""
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for entry in entries:
                handle.write(entry.to_json())
                handle.write("\n")
    except OSError as exc:
        raise LogError(f"cannot write session log {path}: {exc}") from exc


def iter_session_log(path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                yield json.loads(line)
