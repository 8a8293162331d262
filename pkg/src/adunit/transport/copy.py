"""Copy-based loopback-socket transport: the benchmark control.

Same pub/sub and delivery semantics as the loaned-message path, but every
payload is serialized over a local TCP stream, so each message crosses
user/kernel space at least twice. Frames are length-prefixed: a 4-byte
little-endian length, then the frame body (20-byte envelope holding seq,
publish timestamp and flags, then the payload bytes); see
docs/wire_formats.md.

Discovery mirrors the shared-memory naming convention: the publisher
writes its port next to where the segment would live
(`<segment>.port`), topic metadata lives in `<segment>.copymeta`.
"""

from __future__ import annotations

import json
import os
import select
import socket
import struct
import threading
import time

from ..errors import (
    Disconnected,
    MessageTooLarge,
    NameCollision,
    SegmentAllocationFailure,
    StaleHandle,
    TransportFailure,
)
from .shm import FLAG_EOF, LoanHandle, TopicConfig, default_segment_dir, segment_name

_ENVELOPE = struct.Struct("<QQI")  # seq, publish_timestamp, flags
_LEN = struct.Struct("<I")


class CopyTopic:
    """A topic carried over loopback sockets; metadata in a sibling file."""

    def __init__(self, path: str, config: TopicConfig, owner: bool):
        self.path = path
        self.config = config
        self._owner = owner

    @property
    def name(self) -> str:
        return os.path.basename(self.path)

    @property
    def message_size(self) -> int:
        return self.config.message_size

    def create_publisher(self) -> "CopyPublisher":
        return CopyPublisher(self)

    def subscribe(self, timeout: float = 10.0) -> "CopySubscriber":
        return CopySubscriber(self, timeout=timeout)

    def close(self) -> None:
        pass

    def destroy(self) -> None:
        for suffix in (".copymeta", ".port"):
            try:
                os.unlink(self.path + suffix)
            except FileNotFoundError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def create_topic(config: TopicConfig, dir: str | None = None) -> CopyTopic:
    config.validate()
    d = dir or default_segment_dir()
    path = os.path.join(d, segment_name(config.name))
    try:
        fd = os.open(path + ".copymeta", os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o666)
    except FileExistsError:
        raise NameCollision(f"topic already exists: {path}.copymeta") from None
    with os.fdopen(fd, "w") as fh:
        json.dump({"message_size": config.message_size,
                   "pool_capacity": config.pool_capacity,
                   "queue_depth": config.queue_depth,
                   "name": config.name}, fh)
    return CopyTopic(path, config, owner=True)


def open_topic(name: str, dir: str | None = None, timeout: float = 5.0) -> CopyTopic:
    d = dir or default_segment_dir()
    path = os.path.join(d, segment_name(name))
    deadline = time.monotonic() + timeout
    while True:
        try:
            with open(path + ".copymeta") as fh:
                meta = json.load(fh)
            break
        except (FileNotFoundError, json.JSONDecodeError):
            if time.monotonic() >= deadline:
                raise SegmentAllocationFailure(f"no such copy topic: {path}.copymeta") from None
            time.sleep(0.01)
    cfg = TopicConfig(name=meta["name"], message_size=meta["message_size"],
                      pool_capacity=meta["pool_capacity"], queue_depth=meta["queue_depth"])
    return CopyTopic(path, cfg, owner=False)


class CopyPublisher:
    """Single writer; sends each published frame to every connected subscriber."""

    def __init__(self, topic: CopyTopic):
        self.topic = topic
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(("127.0.0.1", 0))
        self._listener.listen(128)
        port = self._listener.getsockname()[1]
        port_path = topic.path + ".port"
        try:
            fd = os.open(port_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o666)
        except FileExistsError:
            self._listener.close()
            raise TransportFailure(f"topic {topic.name} already has a publisher") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(port))
        self._port_path = port_path
        self._clients: list[socket.socket] = []
        self._clients_lock = threading.Lock()
        self._next_seq = 1
        self._closed = False
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                r, _, _ = select.select([self._listener], [], [], 0.1)
                if not r:
                    continue
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._clients_lock:
                self._clients.append(conn)
            try:
                conn.sendall(b"\x01")  # welcome: registration complete
            except OSError:
                self._drop(conn)

    def _drop(self, conn: socket.socket) -> None:
        with self._clients_lock:
            if conn in self._clients:
                self._clients.remove(conn)
        conn.close()

    @property
    def subscriber_count(self) -> int:
        with self._clients_lock:
            return len(self._clients)

    def publish_copy(self, payload, eof: bool = False) -> int:
        """Serialize and send the payload to all current subscribers."""
        if self._closed:
            raise StaleHandle("publisher is closed")
        payload = memoryview(payload)
        if payload.nbytes > self.topic.message_size:
            raise MessageTooLarge(
                f"payload {payload.nbytes} exceeds fixed message size {self.topic.message_size}")
        seq = self._next_seq
        self._next_seq += 1
        ts = time.monotonic_ns()
        head = _LEN.pack(_ENVELOPE.size + payload.nbytes) + _ENVELOPE.pack(
            seq, ts, FLAG_EOF if eof else 0)
        with self._clients_lock:
            clients = list(self._clients)
        dead = []
        for conn in clients:
            try:
                conn.sendmsg([head, payload])
            except OSError:
                dead.append(conn)
        for conn in dead:
            self._drop(conn)
        return seq

    # loaned-style facade so pipeline stages are transport agnostic;
    # the "loan" here is a private scratch buffer, not shared memory
    def borrow(self) -> LoanHandle:
        if self._closed:
            raise StaleHandle("publisher is closed")
        buf = memoryview(bytearray(self.topic.message_size))
        return LoanHandle(buf, None, -1, None, None, self.topic.message_size, 0, writable=True)

    def publish_loaned(self, handle: LoanHandle, length: int | None = None, eof: bool = False) -> int:
        if not (handle._alive and handle.writable):
            raise StaleHandle("handle was already published or returned")
        n = self.topic.message_size if length is None else int(length)
        seq = self.publish_copy(handle.payload[:n], eof=eof)
        handle._retire()
        return seq

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._listener.close()
        self._accept_thread.join(timeout=2.0)
        with self._clients_lock:
            for conn in self._clients:
                conn.close()
            self._clients.clear()
        try:
            os.unlink(self._port_path)
        except FileNotFoundError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CopySubscriber:
    """Connects to the topic publisher and reassembles frames in order."""

    def __init__(self, topic: CopyTopic, timeout: float = 10.0):
        self.topic = topic
        deadline = time.monotonic() + timeout
        port = None
        while True:
            try:
                with open(topic.path + ".port") as fh:
                    port = int(fh.read().strip())
                break
            except (FileNotFoundError, ValueError):
                if time.monotonic() >= deadline:
                    raise Disconnected(f"no publisher on topic {topic.name}") from None
                time.sleep(0.01)
        while True:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                self._sock.connect(("127.0.0.1", port))
                break
            except ConnectionRefusedError:
                self._sock.close()
                if time.monotonic() >= deadline:
                    raise Disconnected(f"publisher on topic {topic.name} refused connection") from None
                time.sleep(0.01)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray()
        self._closed = False
        # welcome byte: after it arrives the publisher has registered us
        if not self._recv_some(deadline - time.monotonic()):
            raise Disconnected(f"publisher on topic {topic.name} closed during handshake")
        del self._buf[0]

    def _recv_some(self, timeout: float | None) -> bool:
        """Read whatever is available into the buffer. Returns False on timeout."""
        r, _, _ = select.select([self._sock], [], [], max(0.0, timeout) if timeout is not None else None)
        if not r:
            return False
        data = self._sock.recv(1 << 20)
        if not data:
            raise Disconnected(f"publisher on topic {self.topic.name} went away")
        self._buf.extend(data)
        return True

    def take_copy(self, block: bool = False, timeout: float | None = None):
        """Receive the next frame; None when no full frame arrives in time."""
        if self._closed:
            raise StaleHandle("subscriber is closed")
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            frame = self._parse_frame()
            if frame is not None:
                return frame
            if not block:
                wait = 0.0
            elif deadline is None:
                wait = None
            else:
                wait = deadline - time.monotonic()
                if wait < 0:
                    return None
            if not self._recv_some(wait):
                return None

    def _parse_frame(self) -> LoanHandle | None:
        if len(self._buf) < _LEN.size:
            return None
        (body_len,) = _LEN.unpack_from(self._buf, 0)
        if len(self._buf) < _LEN.size + body_len:
            return None
        seq, ts, flags = _ENVELOPE.unpack_from(self._buf, _LEN.size)
        start = _LEN.size + _ENVELOPE.size
        payload = bytes(self._buf[start:_LEN.size + body_len])
        del self._buf[:_LEN.size + body_len]
        length = body_len - _ENVELOPE.size
        return LoanHandle(memoryview(payload), None, -1, seq, ts, length, flags, writable=False)

    # loaned-style facade
    def take_loaned(self, block: bool = False, timeout: float | None = None):
        return self.take_copy(block=block, timeout=timeout)

    def return_loaned(self, handle: LoanHandle) -> None:
        if handle.writable or not handle._alive:
            raise StaleHandle("handle was not taken or already returned")
        handle._retire()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
