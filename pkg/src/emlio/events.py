"""Timestamped event log shared by senders, receivers and the bench.

Each event is one JSON line::

    {"kind": "batch_send", "epoch": 0, "node": "n0", "shard": 3, "batch": 5, "t_ns": ...}

Timestamps are wall-clock nanoseconds derived from a monotonic clock anchored
once per process, so they never jump backwards.
"""

from __future__ import annotations

import io
import json
import threading
import time
from pathlib import Path

KINDS = ("batch_send", "batch_recv", "epoch_start", "epoch_end")

_ANCHOR_WALL = time.time_ns()
_ANCHOR_MONO = time.monotonic_ns()


def now_ns() -> int:
    """Wall-clock nanoseconds that advance with the monotonic clock."""
    return _ANCHOR_WALL + (time.monotonic_ns() - _ANCHOR_MONO)


class EventLogger:
    def __init__(self, sink=None):
        """``sink`` is a path, a text file object, or None to keep events in memory."""
        self._lock = threading.Lock()
        self._own = False
        self.events: list[dict] = []
        if sink is None:
            self._file = None
        elif isinstance(sink, (str, Path)):
            self._file = open(sink, "a", buffering=1)
            self._own = True
        else:
            self._file = sink

    def log(self, kind: str, key: tuple, t: int | None = None, **extra) -> dict:
        if kind not in KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        epoch, node, shard, batch = key
        event = {"kind": kind, "epoch": epoch, "node": node, "shard": shard, "batch": batch,
                 "t_ns": now_ns() if t is None else int(t)}
        event.update(extra)
        with self._lock:
            self.events.append(event)
            if self._file is not None:
                self._file.write(json.dumps(event) + "\n")
        return event

    def close(self):
        if self._own and self._file is not None:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def log_event(logger: EventLogger | None, kind: str, key: tuple, t: int | None = None, **extra):
    if logger is not None:
        return logger.log(kind, key, t, **extra)
    return None


def read_events(source) -> list[dict]:
    if isinstance(source, (str, Path)):
        with open(source) as f:
            return [json.loads(line) for line in f if line.strip()]
    if isinstance(source, io.IOBase):
        return [json.loads(line) for line in source if line.strip()]
    return list(source)
