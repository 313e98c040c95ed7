"""In-process publish/subscribe topic bus with latest-value semantics.

Topics carry opaque byte payloads wrapped in sequence-numbered envelopes.
Subscriptions are pull-style bounded queues: new subscribers immediately
receive the topic's current latest value (latched), then every envelope
published afterwards, in per-topic sequence order. On queue overflow the
oldest pending envelope is dropped and counted; the pipeline built on top
only ever cares about fresh data.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

log = logging.getLogger(__name__)

DEFAULT_TOPIC_DEPTH = 16
DEFAULT_QUEUE_SIZE = 64


class BusError(Exception):
    pass


class DuplicateTopicError(BusError):
    """Topic name is already registered on this bus."""


class UnknownTopicError(BusError):
    """Operation names a topic that does not exist."""


@dataclass(frozen=True)
class MessageEnvelope:
    """Topic-stamped carrier for one published payload.

    ``seq`` starts at 0 and increases by exactly 1 per publish on a topic.
    ``publish_time`` is a monotonic-clock nanosecond stamp, deliberately not
    wall-clock, so ordering survives clock adjustments.
    """

    topic: str
    seq: int
    publish_time: int
    payload: bytes


class Subscription:
    """Bounded pull queue of envelopes for one subscriber.

    ``get`` blocks up to ``timeout`` seconds and returns ``None`` on timeout.
    Envelopes arrive in publish order; when the queue is full the oldest
    pending envelope is discarded (``dropped`` counts them).
    """

    def __init__(self, topic_name: str, queue_size: int = DEFAULT_QUEUE_SIZE):
        self.topic_name = topic_name
        self._queue_size = max(1, int(queue_size))
        self._items: deque[MessageEnvelope] = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.dropped = 0

    def _deliver(self, envelope: MessageEnvelope) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._items) >= self._queue_size:
                self._items.popleft()
                self.dropped += 1
            self._items.append(envelope)
            self._cond.notify()

    def get(self, timeout: Optional[float] = None) -> Optional[MessageEnvelope]:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._items:
                if self._closed:
                    return None
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    self._cond.wait(remaining)
            return self._items.popleft()

    def try_get(self) -> Optional[MessageEnvelope]:
        return self.get(timeout=0)

    def drain(self) -> list[MessageEnvelope]:
        """Return every envelope currently pending, oldest first."""
        with self._cond:
            items = list(self._items)
            self._items.clear()
            return items

    def pending(self) -> int:
        with self._cond:
            return len(self._items)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


class _TopicState:
    def __init__(self, name: str, depth: int):
        self.name = name
        self.depth = depth
        self.next_seq = 0
        self.latest: Optional[MessageEnvelope] = None
        self.history: deque[MessageEnvelope] = deque(maxlen=depth)
        self.subscribers: list[Subscription] = []


class Topic:
    """Handle onto one topic of a :class:`Bus`."""

    def __init__(self, bus: "Bus", name: str):
        self._bus = bus
        self.name = name

    def publish(self, payload: bytes) -> int:
        return self._bus.publish(self.name, payload)

    def subscribe(self, queue_size: int = DEFAULT_QUEUE_SIZE) -> Subscription:
        return self._bus.subscribe(self.name, queue_size=queue_size)

    def latest(self) -> Optional[MessageEnvelope]:
        return self._bus.latest(self.name)

    def history(self) -> list[MessageEnvelope]:
        return self._bus.history(self.name)


class Bus:
    """Thread-safe topic registry; publish/subscribe/latest may be called
    concurrently from any thread. Per-topic delivery order is total: every
    subscriber queue receives envelopes in seq order with no reordering.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._topics: dict[str, _TopicState] = {}

    def create_topic(self, name: str, depth: int = DEFAULT_TOPIC_DEPTH) -> Topic:
        if not name:
            raise ValueError("topic name must be non-empty")
        if depth < 1:
            raise ValueError("topic depth must be positive")
        with self._lock:
            if name in self._topics:
                raise DuplicateTopicError(name)
            self._topics[name] = _TopicState(name, depth)
        return Topic(self, name)

    def ensure_topic(self, name: str, depth: int = DEFAULT_TOPIC_DEPTH) -> Topic:
        """Create the topic if absent, otherwise return a handle to it."""
        with self._lock:
            if name not in self._topics:
                self._topics[name] = _TopicState(name, depth)
        return Topic(self, name)

    def topic(self, name: str) -> Topic:
        with self._lock:
            if name not in self._topics:
                raise UnknownTopicError(name)
        return Topic(self, name)

    def has_topic(self, name: str) -> bool:
        with self._lock:
            return name in self._topics

    def topic_names(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def _state(self, name: str) -> _TopicState:
        state = self._topics.get(_name(name))
        if state is None:
            raise UnknownTopicError(_name(name))
        return state

    def publish(self, name, payload: bytes) -> int:
        if not isinstance(payload, (bytes, bytearray)):
            raise TypeError("payload must be bytes")
        with self._lock:
            state = self._state(name)
            envelope = MessageEnvelope(
                topic=state.name,
                seq=state.next_seq,
                publish_time=time.monotonic_ns(),
                payload=bytes(payload),
            )
            state.next_seq += 1
            state.latest = envelope
            state.history.append(envelope)
            # Delivery happens under the bus lock so that concurrent
            # publishers cannot interleave out of seq order.
            for sub in state.subscribers:
                sub._deliver(envelope)
        return envelope.seq

    def subscribe(self, name, queue_size: int = DEFAULT_QUEUE_SIZE) -> Subscription:
        with self._lock:
            state = self._state(name)
            sub = Subscription(state.name, queue_size=queue_size)
            # Latched: hand the current latest value to the newcomer before
            # any later publish can slip in ahead of it.
            if state.latest is not None:
                sub._deliver(state.latest)
            state.subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            state = self._topics.get(sub.topic_name)
            if state is not None and sub in state.subscribers:
                state.subscribers.remove(sub)
        sub.close()

    def latest(self, name) -> Optional[MessageEnvelope]:
        with self._lock:
            return self._state(name).latest

    def history(self, name) -> list[MessageEnvelope]:
        with self._lock:
            return list(self._state(name).history)

    def close(self) -> None:
        with self._lock:
            subs = [s for t in self._topics.values() for s in t.subscribers]
        for sub in subs:
            sub.close()


def _name(name_or_topic) -> str:
    if isinstance(name_or_topic, Topic):
        return name_or_topic.name
    return name_or_topic


def ensure_topics(bus, names: Iterable[tuple[str, int]]) -> None:
    """Create any missing topics; works for local and remote bus handles."""
    for name, depth in names:
        if hasattr(bus, "ensure_topic"):
            bus.ensure_topic(name, depth)
        else:
            try:
                bus.create_topic(name, depth)
            except DuplicateTopicError:
                pass
