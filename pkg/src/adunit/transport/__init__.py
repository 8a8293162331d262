"""Transport selection: zero-copy loaned-message shared memory ("loaned")
or the copy-based loopback-socket baseline ("copy")."""

from __future__ import annotations

from . import copy as copy_transport
from . import shm
from .shm import FLAG_EOF, LoanHandle, TopicConfig, default_segment_dir, segment_name

TRANSPORTS = ("loaned", "copy")


def create_topic(kind: str, config: TopicConfig, dir: str | None = None):
    if kind == "loaned":
        return shm.create_topic(config, dir=dir)
    if kind == "copy":
        return copy_transport.create_topic(config, dir=dir)
    raise ValueError(f"unknown transport {kind!r}, expected one of {TRANSPORTS}")


def open_topic(kind: str, name: str, dir: str | None = None, timeout: float = 5.0):
    if kind == "loaned":
        return shm.open_topic(name, dir=dir, timeout=timeout)
    if kind == "copy":
        return copy_transport.open_topic(name, dir=dir, timeout=timeout)
    raise ValueError(f"unknown transport {kind!r}, expected one of {TRANSPORTS}")


__all__ = [
    "TRANSPORTS",
    "TopicConfig",
    "LoanHandle",
    "FLAG_EOF",
    "create_topic",
    "open_topic",
    "default_segment_dir",
    "segment_name",
    "shm",
    "copy_transport",
]
