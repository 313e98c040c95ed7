"""Session recording and replay.

A recording is a JSONL file: a header line {task_name, config_digest,
started} followed by one line per captured envelope (topic, seq,
publish_time, base64 payload, wall-clock receive time), ordered by
(topic, seq). Replaying republishes the payloads in file order onto a
fresh bus, reproducing the original per-topic (seq, payload) sequences for
any attached subscriber.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .bus import ensure_topics
from .messages import TASK_TOPICS

log = logging.getLogger(__name__)

RECORD_QUEUE_SIZE = 8192


class RecordingError(Exception):
    """Corrupt or truncated recording; carries the offending line number."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class RecordedEntry:
    topic: str
    seq: int
    publish_time: int
    payload: bytes
    recv_time: float


@dataclass(frozen=True)
class SessionRecording:
    task_name: str
    config_digest: str
    started: float
    entries: tuple[RecordedEntry, ...]


def config_digest(config_text: str) -> str:
    return hashlib.sha256(config_text.encode("utf-8")).hexdigest()


class SessionRecorder:
    """Subscribes to the task topics and persists everything seen.

    Queues are sized generously; the recorder is drained once at close, then
    entries are written sorted by (topic, seq).
    """

    def __init__(self, bus, task_name: str, digest: str,
                 topics: Sequence[str] = None):
        ensure_topics(bus, TASK_TOPICS)
        names = list(topics) if topics else [name for name, _ in TASK_TOPICS]
        self._subs = [bus.subscribe(name, queue_size=RECORD_QUEUE_SIZE) for name in names]
        self.task_name = task_name
        self.digest = digest
        self.started = time.time()

    def stop(self) -> SessionRecording:
        entries = []
        for sub in self._subs:
            for envelope in sub.drain():
                entries.append(
                    RecordedEntry(
                        topic=envelope.topic,
                        seq=envelope.seq,
                        publish_time=envelope.publish_time,
                        payload=envelope.payload,
                        recv_time=time.time(),
                    )
                )
            sub.close()
        entries.sort(key=lambda e: (e.topic, e.seq))
        return SessionRecording(
            task_name=self.task_name,
            config_digest=self.digest,
            started=self.started,
            entries=tuple(entries),
        )


def write_recording(recording: SessionRecording, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(
            json.dumps(
                {
                    "header": {
                        "task_name": recording.task_name,
                        "config_digest": recording.config_digest,
                        "started": recording.started,
                    }
                }
            )
        )
        handle.write("\n")
        for entry in recording.entries:
            handle.write(
                json.dumps(
                    {
                        "topic": entry.topic,
                        "seq": entry.seq,
                        "publish_time": entry.publish_time,
                        "payload": base64.b64encode(entry.payload).decode("ascii"),
                        "recv_time": entry.recv_time,
                    }
                )
            )
            handle.write("\n")


def read_recording(path) -> SessionRecording:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return SessionRecording("", "", 0.0, ())
    header = _parse_line(lines[0], 1)
    if "header" not in header:
        raise RecordingError(1, "first line is not a recording header")
    meta = header["header"]
    entries = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        obj = _parse_line(line, lineno)
        try:
            entries.append(
                RecordedEntry(
                    topic=obj["topic"],
                    seq=int(obj["seq"]),
                    publish_time=int(obj["publish_time"]),
                    payload=base64.b64decode(obj["payload"]),
                    recv_time=float(obj.get("recv_time", 0.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordingError(lineno, f"bad entry: {exc}") from exc
    return SessionRecording(
        task_name=str(meta.get("task_name", "")),
        config_digest=str(meta.get("config_digest", "")),
        started=float(meta.get("started", 0.0)),
        entries=tuple(entries),
    )


def _parse_line(line: str, lineno: int) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordingError(lineno, f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise RecordingError(lineno, "expected a JSON object")
    return obj


@dataclass
class ReplayStats:
    topics: int = 0
    published: int = 0
    seq_mismatches: int = 0


def replay(recording: SessionRecording, bus) -> ReplayStats:
    """Republish all entries in file order onto the given bus."""
    stats = ReplayStats()
    topics = []
    for entry in recording.entries:
        if entry.topic not in topics:
            topics.append(entry.topic)
    ensure_topics(bus, [(name, 64) for name in topics])
    stats.topics = len(topics)
    for entry in recording.entries:
        seq = bus.publish(entry.topic, entry.payload)
        stats.published += 1
        if seq != entry.seq:
            stats.seq_mismatches += 1
    if stats.seq_mismatches:
        log.warning(
            "replay produced %d seq mismatches (partial recording?)",
            stats.seq_mismatches,
        )
    return stats


def audit_causality(recording: SessionRecording) -> list[str]:
    """Check the pipeline's causal contract on a recorded session.

    Every consultation's frame_index must be preceded (in publish order) by
    a description with the same frame_index, and no frame_index may receive
    two consultations. Returns human-readable violations.
    """
    from .messages import (
        GPT_CONSULTATION_TOPIC,
        IMAGE_DESCRIPTION_TOPIC,
        Consultation,
        ImageDescription,
    )

    described: set[int] = set()
    consulted: set[int] = set()
    violations: list[str] = []
    ordered = sorted(recording.entries, key=lambda e: e.publish_time)
    for entry in ordered:
        if entry.topic == IMAGE_DESCRIPTION_TOPIC:
            described.add(ImageDescription.from_bytes(entry.payload).frame_index)
        elif entry.topic == GPT_CONSULTATION_TOPIC:
            frame_index = Consultation.from_bytes(entry.payload).frame_index
            if frame_index not in described:
                violations.append(
                    f"consultation for frame {frame_index} precedes any description"
                )
            if frame_index in consulted:
                violations.append(
                    f"frame {frame_index} received more than one consultation"
                )
            consulted.add(frame_index)
    return violations
