"""Loopback wire transport for the bus: length-prefixed JSON frames.

Frame layout: 4-byte big-endian length followed by a UTF-8 JSON body.
Envelope bodies carry exactly {topic, seq, publish_time, payload} with the
payload base64-encoded; command bodies carry an "op" key and replies carry
an "ok" key, which is how the client reader tells replies and deliveries
apart. One server hosts one bus; any number of clients may create topics,
publish, subscribe and read latest over it. A client that sends garbage
gets dropped without disturbing anyone else.
"""

from __future__ import annotations

import base64
import json
import logging
import socket
import struct
import threading
from typing import Optional

from .bus import (
    Bus,
    DuplicateTopicError,
    MessageEnvelope,
    Subscription,
    UnknownTopicError,
    DEFAULT_QUEUE_SIZE,
    DEFAULT_TOPIC_DEPTH,
)

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024  # refuse absurd lengths before allocating


class TransportError(Exception):
    """Socket-level failure: bind, connect, or a peer that went away."""


class ProtocolError(Exception):
    """Malformed frame or JSON body; the offending connection is dropped."""


# -- framing -----------------------------------------------------------------

def write_frame(sock: socket.socket, body: bytes) -> None:
    try:
        sock.sendall(HEADER.pack(len(body)) + body)
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from exc


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """Read one frame; None on clean EOF, ProtocolError on garbage."""
    header = _recv_exact(sock, HEADER.size)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds limit")
    body = _recv_exact(sock, length)
    if body is None:
        raise ProtocolError("connection closed mid-frame")
    return body


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except OSError as exc:
            raise TransportError(f"recv failed: {exc}") from exc
        if not chunk:
            return None if not buf else _raise_truncated()
        buf += chunk
    return buf


def _raise_truncated():
    raise ProtocolError("connection closed mid-frame")


def _decode_json(body: bytes) -> dict:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad frame body: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame body is not a JSON object")
    return obj


# -- envelope <-> json -------------------------------------------------------

def serialize_envelope(env: MessageEnvelope) -> bytes:
    return json.dumps(
        {
            "topic": env.topic,
            "seq": env.seq,
            "publish_time": env.publish_time,
            "payload": base64.b64encode(env.payload).decode("ascii"),
        }
    ).encode("utf-8")


def parse_envelope(body: bytes) -> MessageEnvelope:
    obj = _decode_json(body)
    return envelope_from_obj(obj)


def envelope_from_obj(obj: dict) -> MessageEnvelope:
    try:
        return MessageEnvelope(
            topic=obj["topic"],
            seq=int(obj["seq"]),
            publish_time=int(obj["publish_time"]),
            payload=base64.b64decode(obj["payload"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad envelope: {exc}") from exc


# -- addresses ---------------------------------------------------------------

def parse_address(address: str):
    """"host:port" for TCP or "unix:/path" for a local socket."""
    if address.startswith("unix:"):
        path = address[len("unix:"):]
        if not path:
            raise TransportError(f"bad address {address!r}")
        return (socket.AF_UNIX, path)
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise TransportError(f"bad address {address!r} (want host:port or unix:/path)")
    try:
        return (socket.AF_INET, (host, int(port)))
    except ValueError as exc:
        raise TransportError(f"bad port in {address!r}") from exc


# -- server ------------------------------------------------------------------

class BusServer:
    """Serves one local Bus to remote clients. Call serve() once per bus."""

    def __init__(self, bus: Bus, address: str):
        self._bus = bus
        family, target = parse_address(address)
        self._family = family
        try:
            self._sock = socket.socket(family, socket.SOCK_STREAM)
            if family == socket.AF_INET:
                self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._sock.bind(target)
            self._sock.listen()
        except OSError as exc:
            raise TransportError(f"bind {address!r} failed: {exc}") from exc
        self._stop = threading.Event()
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="bus-server-accept", daemon=True
        )
        self._accept_thread.start()

    @property
    def address(self) -> str:
        if self._family == socket.AF_UNIX:
            return f"unix:{self._sock.getsockname()}"
        host, port = self._sock.getsockname()[:2]
        return f"{host}:{port}"

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                break
            with self._lock:
                self._conns.append(conn)
            threading.Thread(
                target=self._serve_client, args=(conn,),
                name="bus-server-client", daemon=True,
            ).start()

    def _serve_client(self, conn: socket.socket) -> None:
        write_lock = threading.Lock()
        subs: list[Subscription] = []
        try:
            while not self._stop.is_set():
                body = read_frame(conn)
                if body is None:
                    break
                reply = self._handle(conn, write_lock, subs, _decode_json(body))
                with write_lock:
                    write_frame(conn, json.dumps(reply).encode("utf-8"))
        except ProtocolError as exc:
            log.warning("dropping client after protocol error: %s", exc)
        except TransportError:
            pass
        finally:
            for sub in subs:
                self._bus.unsubscribe(sub)
            conn.close()
            with self._lock:
                if conn in self._conns:
                    self._conns.remove(conn)

    def _handle(self, conn, write_lock, subs, cmd: dict) -> dict:
        op = cmd.get("op")
        try:
            if op == "create_topic":
                self._bus.create_topic(cmd["topic"], int(cmd.get("depth", DEFAULT_TOPIC_DEPTH)))
                return {"ok": True}
            if op == "publish":
                payload = base64.b64decode(cmd["payload"])
                seq = self._bus.publish(cmd["topic"], payload)
                return {"ok": True, "seq": seq}
            if op == "subscribe":
                sub = self._bus.subscribe(
                    cmd["topic"], queue_size=int(cmd.get("queue_size", DEFAULT_QUEUE_SIZE))
                )
                subs.append(sub)
                threading.Thread(
                    target=self._forward, args=(conn, write_lock, sub),
                    name=f"bus-forward-{sub.topic_name}", daemon=True,
                ).start()
                return {"ok": True}
            if op == "latest":
                env = self._bus.latest(cmd["topic"])
                obj = None
                if env is not None:
                    obj = json.loads(serialize_envelope(env))
                return {"ok": True, "envelope": obj}
            raise ProtocolError(f"unknown op {op!r}")
        except DuplicateTopicError as exc:
            return {"ok": False, "error": "DuplicateTopic", "message": str(exc)}
        except UnknownTopicError as exc:
            return {"ok": False, "error": "UnknownTopic", "message": str(exc)}
        except (KeyError, ValueError, TypeError) as exc:
            raise ProtocolError(f"bad command: {exc}") from exc

    def _forward(self, conn, write_lock, sub: Subscription) -> None:
        # One thread per remote subscription keeps per-topic order intact.
        while not self._stop.is_set() and not sub.closed:
            env = sub.get(timeout=0.2)
            if env is None:
                continue
            try:
                with write_lock:
                    write_frame(conn, serialize_envelope(env))
            except TransportError:
                sub.close()
                return

    def connection_count(self) -> int:
        with self._lock:
            return len(self._conns)

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(bus: Bus, address: str) -> BusServer:
    return BusServer(bus, address)


# -- client ------------------------------------------------------------------

class RemoteSubscription:
    """Client-side view of a subscription: same pull API as the local one."""

    def __init__(self, topic_name: str, queue_size: int):
        self._inner = Subscription(topic_name, queue_size=queue_size)
        self.topic_name = topic_name

    def get(self, timeout: Optional[float] = None):
        return self._inner.get(timeout)

    def try_get(self):
        return self._inner.try_get()

    def drain(self):
        return self._inner.drain()

    def pending(self) -> int:
        return self._inner.pending()

    def close(self) -> None:
        self._inner.close()

    @property
    def closed(self) -> bool:
        return self._inner.closed

    @property
    def dropped(self) -> int:
        return self._inner.dropped


class RemoteBus:
    """Bus session over a wire connection; mirrors the local Bus surface."""

    def __init__(self, address: str, connect_timeout: float = 5.0):
        family, target = parse_address(address)
        try:
            self._sock = socket.socket(family, socket.SOCK_STREAM)
            self._sock.settimeout(connect_timeout)
            self._sock.connect(target)
            self._sock.settimeout(None)
        except OSError as exc:
            raise TransportError(f"connect {address!r} failed: {exc}") from exc
        self._cmd_lock = threading.Lock()
        self._reply_cond = threading.Condition()
        self._reply: Optional[dict] = None
        self._subs: dict[str, list[RemoteSubscription]] = {}
        self._subs_lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(
            target=self._read_loop, name="bus-client-reader", daemon=True
        )
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                body = read_frame(self._sock)
                if body is None:
                    break
                obj = _decode_json(body)
                if "ok" in obj:
                    with self._reply_cond:
                        self._reply = obj
                        self._reply_cond.notify()
                else:
                    env = envelope_from_obj(obj)
                    with self._subs_lock:
                        targets = list(self._subs.get(env.topic, ()))
                    for sub in targets:
                        sub._inner._deliver(env)
        except (ProtocolError, TransportError) as exc:
            log.warning("remote bus reader stopped: %s", exc)
        finally:
            self._shutdown_subs()

    def _shutdown_subs(self) -> None:
        self._closed = True
        with self._subs_lock:
            subs = [s for group in self._subs.values() for s in group]
        for sub in subs:
            sub.close()
        with self._reply_cond:
            self._reply_cond.notify_all()

    def _request(self, cmd: dict, timeout: float = 10.0) -> dict:
        with self._cmd_lock:
            if self._closed:
                raise TransportError("remote bus session closed")
            write_frame(self._sock, json.dumps(cmd).encode("utf-8"))
            with self._reply_cond:
                while self._reply is None:
                    if self._closed:
                        raise TransportError("remote bus session closed")
                    if not self._reply_cond.wait(timeout):
                        raise TransportError("timed out waiting for reply")
                reply, self._reply = self._reply, None
        if reply.get("ok"):
            return reply
        error = reply.get("error")
        message = reply.get("message", "")
        if error == "DuplicateTopic":
            raise DuplicateTopicError(message)
        if error == "UnknownTopic":
            raise UnknownTopicError(message)
        raise ProtocolError(f"server error {error!r}: {message}")

    def create_topic(self, name: str, depth: int = DEFAULT_TOPIC_DEPTH) -> None:
        self._request({"op": "create_topic", "topic": name, "depth": depth})

    def ensure_topic(self, name: str, depth: int = DEFAULT_TOPIC_DEPTH) -> None:
        try:
            self.create_topic(name, depth)
        except DuplicateTopicError:
            pass

    def publish(self, name: str, payload: bytes) -> int:
        reply = self._request(
            {
                "op": "publish",
                "topic": name,
                "payload": base64.b64encode(bytes(payload)).decode("ascii"),
            }
        )
        return int(reply["seq"])

    def subscribe(self, name: str, queue_size: int = DEFAULT_QUEUE_SIZE) -> RemoteSubscription:
        sub = RemoteSubscription(name, queue_size)
        with self._subs_lock:
            self._subs.setdefault(name, []).append(sub)
        # Register client-side first: the latched envelope may arrive
        # before the subscribe reply does.
        self._request({"op": "subscribe", "topic": name, "queue_size": queue_size})
        return sub

    def latest(self, name: str) -> Optional[MessageEnvelope]:
        reply = self._request({"op": "latest", "topic": name})
        obj = reply.get("envelope")
        if obj is None:
            return None
        return envelope_from_obj(obj)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(address: str, timeout: float = 5.0, retry_for: float = 0.0) -> RemoteBus:
    """Open a remote bus session; optionally keep retrying for ``retry_for``
    seconds so a client can start slightly before its server."""
    import time as _time

    deadline = _time.monotonic() + retry_for
    while True:
        try:
            return RemoteBus(address, connect_timeout=timeout)
        except TransportError:
            if _time.monotonic() >= deadline:
                raise
            _time.sleep(0.1)
