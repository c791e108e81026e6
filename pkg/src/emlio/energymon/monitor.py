"""Tick-aligned sampling of several power sources into one energy series.

Each source gets its own sampler thread.  Samplers wake on a shared tick
schedule ``anchor + k*delta`` (monotonic clock), meet at a per-tick
rendezvous, then read their source.  All readings of tick ``k`` are stamped
with the same wall time ``t_k``.  An accumulator merges readings per tick,
fills gaps, and hands finished points to a writer that persists them in
batches.
"""

from __future__ import annotations

import collections
import logging
import math
import queue
import threading
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

from emlio.energymon.sources import KIND_FIELD
from emlio.energymon.store import FIELDS, EnergyPoint, EnergyStore
from emlio.events import now_ns

log = logging.getLogger(__name__)

MISSING = None


class GapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MonitorConfig:
    store_path: str | Path
    node_id: str = "node"
    interval_s: float = 0.1
    batch_size: int = 64
    max_failures: int = 3      # consecutive errors before a source counts as dead
    max_hold_ticks: int = 50   # cap on how long a gap may hold back output
    flush_s: float = 5.0

    def __post_init__(self):
        if not self.interval_s > 0:
            raise ValueError("interval must be > 0")
        if self.batch_size < 1:
            raise ValueError("writer batch size must be >= 1")


def _fill(xs, values, left=None):
    """Fill None entries of one field; returns (filled, flags).

    ``left`` is an optional (x, value) real sample before ``xs[0]``.
    """
    real = [(x, v) for x, v in zip(xs, values) if v is not None]
    if left is not None:
        real.insert(0, left)
    out, flags = [], []
    j = 0  # index of the first real sample with x > current
    for x, v in zip(xs, values):
        while j < len(real) and real[j][0] <= x:
            j += 1
        if v is not None:
            out.append(v)
            flags.append(False)
            continue
        before = real[j - 1] if j > 0 else None
        after = real[j] if j < len(real) else None
        if before and after:
            (x0, v0), (x1, v1) = before, after
            out.append(v0 + (v1 - v0) * (x - x0) / (x1 - x0))
        elif before or after:
            out.append((before or after)[1])
        else:
            out.append(0.0)
        flags.append(True)
    return out, flags


def interpolate_gaps(points: list[EnergyPoint]) -> list[EnergyPoint]:
    """Fill missing (None) field values across a run of consecutive ticks.

    Interior gaps are interpolated linearly in ``t_k``; gaps at either end
    copy the nearest real sample.  A field with no real sample at all is
    zero-filled and a GapWarning is issued.  Filled values are flagged.
    """
    if not points:
        return []
    fields = [f for f in FIELDS if any(f in p.values for p in points)]
    xs = [p.t_k for p in points]
    filled = {}
    for f in fields:
        values = [p.values.get(f) for p in points]
        if all(v is None for v in values):
            warnings.warn(f"{f} has no real samples; filled with zeros", GapWarning, stacklevel=2)
        filled[f] = _fill(xs, values)
    return [EnergyPoint(p.t_k, p.node_id,
                        {f: filled[f][0][i] for f in fields},
                        {f: filled[f][1][i] for f in fields})
            for i, p in enumerate(points)]


class TickRendezvous:
    """Barrier keyed by tick number, with a timeout so a stalled party is skipped."""

    def __init__(self, parties: int):
        self.parties = parties
        self._arrived: dict[int, int] = collections.defaultdict(int)
        self._cv = threading.Condition()

    def arrive(self, k: int, timeout: float) -> bool:
        with self._cv:
            self._arrived[k] += 1
            self._cv.notify_all()
            ok = self._cv.wait_for(lambda: self._arrived[k] >= self.parties, timeout)
            for old in [t for t in self._arrived if t < k - 8]:
                del self._arrived[old]
            return ok


class _Sampler(threading.Thread):
    def __init__(self, index, source, monitor):
        super().__init__(name=f"energy-sampler-{index}", daemon=True)
        self.index = index
        self.source = source
        self.m = monitor
        self.failures = 0
        self.dead = False
        self.missing = 0

    def _read(self, delta):
        if self.dead:
            return None
        try:
            raw = self.source.sample(delta)
            values = {KIND_FIELD[k]: float(raw[k]) for k in self.source.kinds}
            if any(not math.isfinite(v) or v < 0 for v in values.values()):
                raise ValueError(f"invalid reading {raw}")
        except Exception as exc:
            self.failures += 1
            log.debug("source %d failed: %s", self.index, exc)
            if self.failures >= self.m.config.max_failures:
                self.dead = True
                self.m.warn(f"source {self.index} ({type(self.source).__name__}) failed "
                            f"{self.failures} times in a row; its fields are interpolated from now on: {exc}")
            return None
        self.failures = 0
        return values

    def run(self):
        m, delta = self.m, self.m.config.interval_s
        k = 0
        while True:
            deadline = m.anchor_mono + k * delta
            wait = deadline - time.monotonic()
            if (wait > 0 and m.stopping.wait(wait)) or m.stopping.is_set():
                break
            if time.monotonic() - deadline > delta / 2:
                values = None
                self.missing += 1
            else:
                m.rendezvous.arrive(k, max(0.0, deadline + delta / 2 - time.monotonic()))
                m.sample_starts.append((k, self.index, time.monotonic()))
                values = self._read(delta)
                if values is None:
                    self.missing += 1
            m.readings.put((k, self.index, values))
            k += 1


_STOP = object()


class MonitorHandle:
    def __init__(self, config: MonitorConfig, sources):
        if not sources:
            raise ValueError("need at least one power source")
        self.config = config
        self.sources = list(sources)
        self.store = EnergyStore(config.store_path)
        self.fields = [f for f in FIELDS
                       if any(KIND_FIELD[k] == f for s in self.sources for k in s.kinds)]
        self.warnings: list[str] = []
        self.readings: queue.Queue = queue.Queue(maxsize=1024)
        self.finished: queue.Queue = queue.Queue(maxsize=1024)
        self.rendezvous = TickRendezvous(len(self.sources))
        self.sample_starts: collections.deque = collections.deque(maxlen=100_000)
        self.stopping = threading.Event()
        self.points_written = 0
        self.dropped_ticks = 0
        self._error: BaseException | None = None
        self._stopped = False
        self._stop_lock = threading.Lock()
        self.anchor_mono = time.monotonic()
        self.anchor_ns = now_ns()
        self._samplers = [_Sampler(i, s, self) for i, s in enumerate(self.sources)]
        self._acc = threading.Thread(target=self._accumulate, name="energy-accumulator", daemon=True)
        self._writer = threading.Thread(target=self._write, name="energy-writer", daemon=True)
        self._acc.start()
        self._writer.start()
        for s in self._samplers:
            s.start()

    def tick_time(self, k: int) -> int:
        return self.anchor_ns + round(k * self.config.interval_s * 1e9)

    def warn(self, message: str):
        self.warnings.append(message)
        log.warning(message)

    # accumulator: merge per tick, hold back ticks whose gaps are not yet bounded on the right
    def _accumulate(self):
        n = len(self.sources)
        partial: dict[int, dict] = {}
        counts: collections.Counter = collections.Counter()
        pending: list[tuple[int, dict]] = []   # complete ticks, ascending k
        anchor: dict[str, tuple[int, float]] = {}
        zero_warned: set[str] = set()
        next_k = 0

        def emit(m):
            nonlocal pending
            chunk, pending = pending[:m], pending[m:]
            xs = [k for k, _ in chunk]
            cols = {}
            for f in self.fields:
                values = [v.get(f) for _, v in chunk]
                later = [(k, v[f]) for k, v in pending if v.get(f) is not None]
                series_x, series_v = xs + ([later[0][0]] if later else []), values + ([later[0][1]] if later else [])
                filled, flags = _fill(series_x, series_v, anchor.get(f))
                cols[f] = (filled[:len(chunk)], flags[:len(chunk)])
                real = [(k, v) for k, v in zip(xs, values) if v is not None]
                if real:
                    anchor[f] = real[-1]
                elif f not in anchor and not later and f not in zero_warned:
                    zero_warned.add(f)
                    self.warn(f"{f} has no real samples; filled with zeros")
            for i, k in enumerate(xs):
                point = EnergyPoint(self.tick_time(k), self.config.node_id,
                                    {f: cols[f][0][i] for f in self.fields},
                                    {f: cols[f][1][i] for f in self.fields})
                self.finished.put(point)

        def ready_prefix():
            last_real = {f: -1 for f in self.fields}
            for i, (_, v) in enumerate(pending):
                for f in self.fields:
                    if v.get(f) is not None:
                        last_real[f] = i
            m = 0
            for i, (_, v) in enumerate(pending):
                if any(v.get(f) is None and last_real[f] < i for f in self.fields):
                    break
                m = i + 1
            if m == 0 and len(pending) > self.config.max_hold_ticks:
                m = len(pending) - self.config.max_hold_ticks
            return m

        while True:
            item = self.readings.get()
            if item is _STOP:
                break
            k, idx, values = item
            merged = partial.setdefault(k, {})
            for f in self.sources[idx].kinds:
                merged[KIND_FIELD[f]] = None if values is None else values[KIND_FIELD[f]]
            counts[k] += 1
            while counts.get(next_k) == n:
                pending.append((next_k, partial.pop(next_k)))
                del counts[next_k]
                next_k += 1
            m = ready_prefix()
            if m:
                emit(m)
        if pending:
            emit(len(pending))
        self.dropped_ticks = len(partial)
        self.finished.put(_STOP)

    def _write(self):
        batch: list[EnergyPoint] = []
        oldest = None
        while True:
            try:
                item = self.finished.get(timeout=min(self.config.flush_s, 1.0))
            except queue.Empty:
                item = None
            if item is not None and item is not _STOP:
                batch.append(item)
                oldest = oldest or time.monotonic()
            stale = oldest is not None and time.monotonic() - oldest >= self.config.flush_s
            if batch and (len(batch) >= self.config.batch_size or stale or item is _STOP):
                try:
                    self.store.write_points(batch)
                    self.points_written += len(batch)
                except Exception as exc:
                    if self._error is None:
                        self._error = exc
                        log.error("energy store write failed: %s", exc)
                batch, oldest = [], None
            if item is _STOP:
                return

    @property
    def missing_counts(self) -> list[int]:
        return [s.missing for s in self._samplers]

    def stop(self, timeout: float = 30.0) -> None:
        """Stop sampling, flush every pending point and join all threads."""
        with self._stop_lock:
            if self._stopped:
                return
            self._stopped = True
            self.stopping.set()
            for s in self._samplers:
                s.join(timeout)
            self.readings.put(_STOP)
            self._acc.join(timeout)
            self._writer.join(timeout)
        if self._error is not None:
            raise self._error

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def run_monitor(config: MonitorConfig, sources) -> MonitorHandle:
    return MonitorHandle(config, sources)
