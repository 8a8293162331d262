"""Zero-copy loaned-message pub/sub over a named shared-memory segment.

One OS shared-memory object per topic (a file in /dev/shm mapped with
MAP_SHARED), discoverable by name on the same host. Payload bytes are
written once by the publisher into a pooled chunk and read in place by
every subscriber; only chunk indices move through the per-subscriber
queues. All accounting state (free pool, refcounts, queues, limits)
lives inside the segment and is mutated under a per-topic file lock, so
the same semantics hold across threads and across processes.

Blocking takes wait on a per-subscriber named FIFO that the publisher
rings after enqueueing, so there is no busy spinning.

The byte-exact segment layout is documented in docs/wire_formats.md and
mirrored by the offset constants below.
"""

from __future__ import annotations

import fcntl
import glob
import mmap
import os
import select
import struct
import tempfile
import time
from dataclasses import dataclass

from ..errors import (
    LoansExhausted,
    MessageTooLarge,
    NameCollision,
    PoolExhausted,
    SegmentAllocationFailure,
    StaleHandle,
    TooManySubscribers,
    TransportFailure,
)

MAGIC = b"ADU1"
VERSION = 1
MAX_SUBSCRIBERS = 127
MAX_LOANS = 8

FLAG_EOF = 0x1

# header field offsets (little-endian throughout)
_H_MAGIC = 0          # 4s
_H_VERSION = 4        # u32
_H_MSG_SIZE = 8       # u64
_H_POOL_CAP = 16      # u32
_H_QUEUE_DEPTH = 20   # u32
_H_MAX_SUBS = 24      # u32
_H_MAX_LOANS = 28     # u32
_H_PUB_ATTACHED = 32  # u32
_H_LOANS_OUT = 36     # u32
_H_NEXT_SEQ = 40      # u64
_H_FREE_COUNT = 48    # u32
_H_SUB_COUNT = 52     # u32
HEADER_SIZE = 64

# chunk record: seq u64, timestamp u64, payload_length u64,
#               refcount u32, state u32, flags u32, pad u32
CHUNK_RECORD = struct.Struct("<QQQIII4x")
CHUNK_RECORD_SIZE = CHUNK_RECORD.size  # 40

STATE_FREE = 0
STATE_LOANED = 1
STATE_PUBLISHED = 2

# subscriber slot: active u32, gen u32, head u32, count u32, drops u64,
#                  then ring of queue_depth u32 indices, padded to 8 bytes
_SLOT_FIXED = 24


def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


def default_segment_dir() -> str:
    override = os.environ.get("ADUNIT_SHM_DIR")
    if override:
        return override
    return "/dev/shm" if os.path.isdir("/dev/shm") else tempfile.gettempdir()


def segment_name(topic: str) -> str:
    """Map a topic name to its shared-memory object name.

    `adunit.<topic>` by default; ADUNIT_SEGMENT_PREFIX namespaces parallel
    runs as `adunit.<prefix>.<topic>`.
    """
    prefix = os.environ.get("ADUNIT_SEGMENT_PREFIX", "")
    return f"adunit.{prefix}.{topic}" if prefix else f"adunit.{topic}"


@dataclass(frozen=True)
class TopicConfig:
    """Fixed-size topic parameters; message length never varies per topic."""

    name: str
    message_size: int
    pool_capacity: int = 24
    queue_depth: int = 8

    def validate(self) -> None:
        if not self.name or "/" in self.name or len(self.name) > 128:
            raise SegmentAllocationFailure(f"invalid topic name: {self.name!r}")
        if self.message_size <= 0:
            raise SegmentAllocationFailure("message_size must be > 0 (fixed-length messages)")
        if self.pool_capacity < 1 or self.queue_depth < 1:
            raise SegmentAllocationFailure("pool_capacity and queue_depth must be >= 1")
        if self.pool_capacity < MAX_LOANS + self.queue_depth:
            raise SegmentAllocationFailure(
                f"pool_capacity must cover max loans + queue depth "
                f"({MAX_LOANS} + {self.queue_depth}), got {self.pool_capacity}"
            )


class _Layout:
    """Byte offsets of each region for a given config."""

    def __init__(self, message_size: int, pool_capacity: int, queue_depth: int):
        self.message_size = message_size
        self.pool_capacity = pool_capacity
        self.queue_depth = queue_depth
        self.free_stack_off = HEADER_SIZE
        self.chunk_table_off = _align(self.free_stack_off + 4 * pool_capacity, 64)
        self.slot_size = _align(_SLOT_FIXED + 4 * queue_depth, 8)
        self.sub_table_off = _align(self.chunk_table_off + CHUNK_RECORD_SIZE * pool_capacity, 64)
        self.payload_off = _align(self.sub_table_off + self.slot_size * MAX_SUBSCRIBERS, 4096)
        self.payload_stride = _align(message_size, 64)
        self.total_size = self.payload_off + self.payload_stride * pool_capacity

    def chunk_off(self, idx: int) -> int:
        return self.chunk_table_off + idx * CHUNK_RECORD_SIZE

    def slot_off(self, slot: int) -> int:
        return self.sub_table_off + slot * self.slot_size

    def chunk_payload_off(self, idx: int) -> int:
        return self.payload_off + idx * self.payload_stride


class _TopicLock:
    """Exclusive per-topic lock via flock on a sibling lock file.

    Each endpoint opens its own descriptor, so the lock arbitrates both
    between processes and between threads of one process.
    """

    def __init__(self, path: str):
        self._fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o666)

    def __enter__(self):
        fcntl.flock(self._fd, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        fcntl.flock(self._fd, fcntl.LOCK_UN)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


class LoanHandle:
    """A chunk temporarily lent out for writing (publisher) or reading
    (subscriber). Becomes unusable once published or returned."""

    __slots__ = ("payload", "offset", "index", "seq", "publish_timestamp",
                 "payload_length", "flags", "writable", "_alive")

    def __init__(self, payload, offset, index, seq, timestamp, length, flags, writable):
        self.payload = payload
        self.offset = offset
        self.index = index
        self.seq = seq
        self.publish_timestamp = timestamp
        self.payload_length = length
        self.flags = flags
        self.writable = writable
        self._alive = True

    @property
    def eof(self) -> bool:
        return bool(self.flags & FLAG_EOF)

    def _retire(self) -> None:
        self._alive = False
        self.payload = None


class ShmTopic:
    """An attached shared-memory topic segment."""

    def __init__(self, path: str, mm: mmap.mmap, layout: _Layout, owner: bool):
        self.path = path
        self._mm = mm
        self._view = memoryview(mm)
        self.layout = layout
        self._owner = owner
        self._lock = _TopicLock(path + ".lock")
        self._closed = False

    # -- header accessors (call under lock unless the field is immutable) --

    def _u32(self, off: int) -> int:
        return struct.unpack_from("<I", self._mm, off)[0]

    def _set_u32(self, off: int, val: int) -> None:
        struct.pack_into("<I", self._mm, off, val)

    def _u64(self, off: int) -> int:
        return struct.unpack_from("<Q", self._mm, off)[0]

    def _set_u64(self, off: int, val: int) -> None:
        struct.pack_into("<Q", self._mm, off, val)

    @property
    def name(self) -> str:
        return os.path.basename(self.path)

    @property
    def message_size(self) -> int:
        return self.layout.message_size

    @property
    def pool_capacity(self) -> int:
        return self.layout.pool_capacity

    @property
    def queue_depth(self) -> int:
        return self.layout.queue_depth

    def stats(self) -> dict:
        with self._lock:
            return {
                "free_count": self._u32(_H_FREE_COUNT),
                "loans_outstanding": self._u32(_H_LOANS_OUT),
                "subscriber_count": self._u32(_H_SUB_COUNT),
                "next_seq": self._u64(_H_NEXT_SEQ),
            }

    @property
    def free_count(self) -> int:
        return self.stats()["free_count"]

    @property
    def subscriber_count(self) -> int:
        return self.stats()["subscriber_count"]

    # -- free pool (caller holds lock) --

    def _pop_free(self) -> int:
        n = self._u32(_H_FREE_COUNT)
        if n == 0:
            raise PoolExhausted(f"no free chunk in pool of {self.pool_capacity} on {self.name}")
        idx = self._u32(self.layout.free_stack_off + 4 * (n - 1))
        self._set_u32(_H_FREE_COUNT, n - 1)
        return idx

    def _push_free(self, idx: int) -> None:
        n = self._u32(_H_FREE_COUNT)
        self._set_u32(self.layout.free_stack_off + 4 * n, idx)
        self._set_u32(_H_FREE_COUNT, n + 1)

    def _release_ref(self, idx: int) -> None:
        off = self.layout.chunk_off(idx)
        ref = self._u32(off + 24)
        if ref == 0:
            raise StaleHandle(f"refcount underflow on chunk {idx}")
        ref -= 1
        self._set_u32(off + 24, ref)
        if ref == 0:
            self._set_u32(off + 28, STATE_FREE)
            self._push_free(idx)

    # -- fifo naming --

    def _fifo_path(self, slot: int, gen: int) -> str:
        return f"{self.path}.s{slot}.g{gen}.fifo"

    # -- endpoints --

    def create_publisher(self) -> "ShmPublisher":
        return ShmPublisher(self)

    def subscribe(self) -> "ShmSubscriber":
        return ShmSubscriber(self)

    # -- lifecycle --

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._lock.close()
        try:
            self._view.release()
            self._mm.close()
        except BufferError:
            pass  # outstanding payload views keep the mapping alive until GC

    def destroy(self) -> None:
        """Close and unlink the segment and its sibling files."""
        path = self.path
        self.close()
        unlink_segment_files(path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def unlink_segment_files(path: str) -> None:
    for p in [path, path + ".lock"] + glob.glob(glob.escape(path) + ".s*.fifo"):
        try:
            os.unlink(p)
        except FileNotFoundError:
            pass


def create_topic(config: TopicConfig, dir: str | None = None) -> ShmTopic:
    """Create the shared segment for a topic and attach to it.

    The segment becomes discoverable by other processes under
    segment_name(config.name) as soon as this returns.
    """
    config.validate()
    d = dir or default_segment_dir()
    path = os.path.join(d, segment_name(config.name))
    layout = _Layout(config.message_size, config.pool_capacity, config.queue_depth)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o666)
    except FileExistsError:
        raise NameCollision(f"topic segment already exists: {path}") from None
    try:
        os.ftruncate(fd, layout.total_size)
        mm = mmap.mmap(fd, layout.total_size, mmap.MAP_SHARED)
    except (OSError, ValueError) as exc:
        os.close(fd)
        os.unlink(path)
        raise SegmentAllocationFailure(f"cannot allocate segment {path}: {exc}") from exc
    os.close(fd)

    struct.pack_into("<I", mm, _H_VERSION, VERSION)
    struct.pack_into("<Q", mm, _H_MSG_SIZE, config.message_size)
    struct.pack_into("<I", mm, _H_POOL_CAP, config.pool_capacity)
    struct.pack_into("<I", mm, _H_QUEUE_DEPTH, config.queue_depth)
    struct.pack_into("<I", mm, _H_MAX_SUBS, MAX_SUBSCRIBERS)
    struct.pack_into("<I", mm, _H_MAX_LOANS, MAX_LOANS)
    struct.pack_into("<Q", mm, _H_NEXT_SEQ, 1)
    # free stack holds every chunk; index 0 on top so it is borrowed first
    for pos, idx in enumerate(reversed(range(config.pool_capacity))):
        struct.pack_into("<I", mm, HEADER_SIZE + 4 * pos, idx)
    struct.pack_into("<I", mm, _H_FREE_COUNT, config.pool_capacity)
    # magic goes in last: attachers treat a magic mismatch as "not ready"
    mm[_H_MAGIC:_H_MAGIC + 4] = MAGIC
    return ShmTopic(path, mm, layout, owner=True)


def open_topic(name: str, dir: str | None = None, timeout: float = 5.0) -> ShmTopic:
    """Attach to an existing topic segment by topic name."""
    d = dir or default_segment_dir()
    path = os.path.join(d, segment_name(name))
    deadline = time.monotonic() + timeout
    while True:
        try:
            fd = os.open(path, os.O_RDWR)
            break
        except FileNotFoundError:
            if time.monotonic() >= deadline:
                raise SegmentAllocationFailure(f"no such topic segment: {path}") from None
            time.sleep(0.01)
    try:
        size = os.fstat(fd).st_size
        mm = mmap.mmap(fd, size, mmap.MAP_SHARED)
    finally:
        os.close(fd)
    while mm[_H_MAGIC:_H_MAGIC + 4] != MAGIC:
        if time.monotonic() >= deadline:
            mm.close()
            raise SegmentAllocationFailure(f"segment {path} never became ready")
        time.sleep(0.01)
    version = struct.unpack_from("<I", mm, _H_VERSION)[0]
    if version != VERSION:
        mm.close()
        raise SegmentAllocationFailure(f"segment {path} has layout version {version}, expected {VERSION}")
    message_size = struct.unpack_from("<Q", mm, _H_MSG_SIZE)[0]
    pool_capacity = struct.unpack_from("<I", mm, _H_POOL_CAP)[0]
    queue_depth = struct.unpack_from("<I", mm, _H_QUEUE_DEPTH)[0]
    layout = _Layout(message_size, pool_capacity, queue_depth)
    if layout.total_size != size:
        mm.close()
        raise SegmentAllocationFailure(f"segment {path} size {size} does not match layout {layout.total_size}")
    return ShmTopic(path, mm, layout, owner=False)


class ShmPublisher:
    """Single writer of a topic. Drive from one thread at a time."""

    def __init__(self, topic: ShmTopic):
        self.topic = topic
        self._lock = _TopicLock(topic.path + ".lock")
        with self._lock:
            if topic._u32(_H_PUB_ATTACHED):
                self._lock.close()
                raise TransportFailure(f"topic {topic.name} already has a publisher (single-writer topics)")
            topic._set_u32(_H_PUB_ATTACHED, 1)
        self._doorbells: dict[int, tuple[int, int]] = {}  # slot -> (gen, wfd)
        self._outstanding: set[int] = set()
        self._closed = False

    @property
    def loans_outstanding(self) -> int:
        with self._lock:
            return self.topic._u32(_H_LOANS_OUT)

    def borrow(self) -> LoanHandle:
        """Request a free chunk for writing. At most 8 may be outstanding."""
        if self._closed:
            raise StaleHandle("publisher is closed")
        t = self.topic
        with self._lock:
            if t._u32(_H_LOANS_OUT) >= MAX_LOANS:
                raise LoansExhausted(f"{MAX_LOANS} loaned messages already outstanding")
            idx = t._pop_free()
            off = t.layout.chunk_off(idx)
            CHUNK_RECORD.pack_into(t._mm, off, 0, 0, 0, 1, STATE_LOANED, 0)
            t._set_u32(_H_LOANS_OUT, t._u32(_H_LOANS_OUT) + 1)
        self._outstanding.add(idx)
        poff = t.layout.chunk_payload_off(idx)
        payload = t._view[poff:poff + t.message_size]
        return LoanHandle(payload, poff, idx, None, None, t.message_size, 0, writable=True)

    def publish_loaned(self, handle: LoanHandle, length: int | None = None, eof: bool = False) -> int:
        """Publish a borrowed chunk by reference to every current subscriber.

        Payload bytes written into handle.payload before this call are
        visible to any take that later returns this chunk. Returns the
        assigned sequence number.
        """
        if not (handle._alive and handle.writable) or handle.index not in self._outstanding:
            raise StaleHandle("handle was already published or returned")
        t = self.topic
        n = t.message_size if length is None else int(length)
        if n > t.message_size:
            raise MessageTooLarge(f"payload {n} exceeds fixed message size {t.message_size}")
        if n < 0:
            raise MessageTooLarge("payload length must be >= 0")
        flags = FLAG_EOF if eof else 0
        idx = handle.index
        ring: list[tuple[int, int]] = []
        with self._lock:
            seq = t._u64(_H_NEXT_SEQ)
            t._set_u64(_H_NEXT_SEQ, seq + 1)
            ts = time.monotonic_ns()
            off = t.layout.chunk_off(idx)
            refs = 0
            for slot in range(MAX_SUBSCRIBERS):
                soff = t.layout.slot_off(slot)
                if not t._u32(soff):
                    continue
                gen = t._u32(soff + 4)
                head = t._u32(soff + 8)
                count = t._u32(soff + 12)
                depth = t.queue_depth
                if count == depth:  # drop-oldest keeps the latest sensor data
                    oldest = t._u32(soff + _SLOT_FIXED + 4 * head)
                    head = (head + 1) % depth
                    count -= 1
                    t._set_u64(soff + 16, t._u64(soff + 16) + 1)
                    t._release_ref(oldest)
                tail = (head + count) % depth
                t._set_u32(soff + _SLOT_FIXED + 4 * tail, idx)
                t._set_u32(soff + 8, head)
                t._set_u32(soff + 12, count + 1)
                refs += 1
                ring.append((slot, gen))
            CHUNK_RECORD.pack_into(t._mm, off, seq, ts, n, refs,
                                   STATE_PUBLISHED if refs else STATE_FREE, flags)
            if refs == 0:
                t._push_free(idx)
            t._set_u32(_H_LOANS_OUT, t._u32(_H_LOANS_OUT) - 1)
        self._outstanding.discard(idx)
        handle._retire()
        for slot, gen in ring:
            self._ring_doorbell(slot, gen)
        return seq

    def _ring_doorbell(self, slot: int, gen: int) -> None:
        cached = self._doorbells.get(slot)
        if cached is not None and cached[0] != gen:
            os.close(cached[1])
            cached = None
            del self._doorbells[slot]
        if cached is None:
            path = self.topic._fifo_path(slot, gen)
            try:
                wfd = os.open(path, os.O_WRONLY | os.O_NONBLOCK)
            except OSError:
                return  # no reader yet or already gone; queue state is authoritative
            self._doorbells[slot] = (gen, wfd)
            cached = (gen, wfd)
        try:
            os.write(cached[1], b"\x01")
        except BlockingIOError:
            pass  # fifo full: subscriber has plenty of pending wakeups
        except (BrokenPipeError, OSError):
            os.close(cached[1])
            self._doorbells.pop(slot, None)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        t = self.topic
        with self._lock:
            for idx in self._outstanding:  # abandons unpublished loans
                off = t.layout.chunk_off(idx)
                t._set_u32(off + 24, 0)
                t._set_u32(off + 28, STATE_FREE)
                t._push_free(idx)
                t._set_u32(_H_LOANS_OUT, t._u32(_H_LOANS_OUT) - 1)
            self._outstanding.clear()
            t._set_u32(_H_PUB_ATTACHED, 0)
        for _, wfd in self._doorbells.values():
            os.close(wfd)
        self._doorbells.clear()
        self._lock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ShmSubscriber:
    """One bounded FIFO queue of chunk references; receives messages
    published after registration only."""

    def __init__(self, topic: ShmTopic):
        self.topic = topic
        self._lock = _TopicLock(topic.path + ".lock")
        self._closed = False
        with self._lock:
            slot = None
            for s in range(MAX_SUBSCRIBERS):
                if not topic._u32(topic.layout.slot_off(s)):
                    slot = s
                    break
            if slot is None:
                self._lock.close()
                raise TooManySubscribers(f"topic {topic.name} already has {MAX_SUBSCRIBERS} subscriptions")
            soff = topic.layout.slot_off(slot)
            gen = topic._u32(soff + 4) + 1
            self._fifo_path = topic._fifo_path(slot, gen)
            try:
                os.mkfifo(self._fifo_path)
            except FileExistsError:
                pass
            self._rfd = os.open(self._fifo_path, os.O_RDONLY | os.O_NONBLOCK)
            topic._set_u32(soff + 4, gen)
            topic._set_u32(soff + 8, 0)
            topic._set_u32(soff + 12, 0)
            topic._set_u64(soff + 16, 0)
            topic._set_u32(soff, 1)
            topic._set_u32(_H_SUB_COUNT, topic._u32(_H_SUB_COUNT) + 1)
        self.slot = slot
        self._poll = select.poll()
        self._poll.register(self._rfd, select.POLLIN)

    @property
    def drops(self) -> int:
        with self._lock:
            return self.topic._u64(self.topic.layout.slot_off(self.slot) + 16)

    def _try_dequeue(self) -> LoanHandle | None:
        t = self.topic
        soff = t.layout.slot_off(self.slot)
        with self._lock:
            count = t._u32(soff + 12)
            if count == 0:
                return None
            head = t._u32(soff + 8)
            idx = t._u32(soff + _SLOT_FIXED + 4 * head)
            t._set_u32(soff + 8, (head + 1) % t.queue_depth)
            t._set_u32(soff + 12, count - 1)
            seq, ts, length, _, _, flags = CHUNK_RECORD.unpack_from(t._mm, t.layout.chunk_off(idx))
        poff = t.layout.chunk_payload_off(idx)
        payload = t._view[poff:poff + length].toreadonly()
        return LoanHandle(payload, poff, idx, seq, ts, length, flags, writable=False)

    def take_loaned(self, block: bool = False, timeout: float | None = None) -> LoanHandle | None:
        """Dequeue the oldest queued message as a read-only loan.

        Returns None when the queue stays empty (non-blocking call, or the
        timeout elapsed). Delivery order per subscriber equals publish
        order modulo drop-oldest overflow.
        """
        if self._closed:
            raise StaleHandle("subscriber is closed")
        handle = self._try_dequeue()
        if handle is not None or not block:
            return handle
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if deadline is None:
                wait_ms = 60_000
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                wait_ms = max(1, int(remaining * 1000))
            self._poll.poll(wait_ms)
            self._drain_doorbell()
            handle = self._try_dequeue()
            if handle is not None:
                return handle

    def _drain_doorbell(self) -> None:
        try:
            while os.read(self._rfd, 4096):
                pass
        except BlockingIOError:
            pass

    def return_loaned(self, handle: LoanHandle) -> None:
        """Return a taken message so its chunk can be reused."""
        if handle.writable or not handle._alive:
            raise StaleHandle("handle was not taken from this transport or already returned")
        with self._lock:
            self.topic._release_ref(handle.index)
        handle._retire()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        t = self.topic
        soff = t.layout.slot_off(self.slot)
        with self._lock:
            head = t._u32(soff + 8)
            count = t._u32(soff + 12)
            for i in range(count):
                idx = t._u32(soff + _SLOT_FIXED + 4 * ((head + i) % t.queue_depth))
                t._release_ref(idx)
            t._set_u32(soff + 12, 0)
            t._set_u32(soff, 0)
            t._set_u32(_H_SUB_COUNT, t._u32(_H_SUB_COUNT) - 1)
        os.close(self._rfd)
        try:
            os.unlink(self._fifo_path)
        except FileNotFoundError:
            pass
        self._lock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
