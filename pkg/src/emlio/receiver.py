"""The compute-side receiver: fan-in streams, prefetch, and feed a consumer.

An ingest thread takes frames from the pull endpoint only when the prefetch
queue has room, decodes BATCH payloads and enqueues them; a full queue
therefore stops credits flowing back and stalls the senders.  The consumer
loop warms up by waiting for ``Q`` buffered batches before each epoch, then
dequeues, runs ``on_batch`` and logs a ``batch_recv`` event per batch.
"""

from __future__ import annotations

import collections
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from emlio.events import EventLogger, log_event, now_ns
from emlio.planner import EpochPlan
from emlio.sender import decode_batch, decode_epoch_end
from emlio.transport import (
    BATCH,
    EPOCH_END,
    ChannelConfig,
    EndOfStream,
    StreamError,
    TransportError,
    open_pull,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReceiverConfig:
    listen_addr: tuple[str, int] = ("127.0.0.1", 0)
    prefetch_depth: int = 2
    expected_senders: int = 1
    compute_ms: float = 0.0
    epochs: int = 1
    node_id: str = "compute"
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def __post_init__(self):
        if self.prefetch_depth < 1:
            raise ValueError("prefetch_depth must be >= 1")
        if self.expected_senders < 1:
            raise ValueError("expected_senders must be >= 1")


@dataclass
class DecodedBatch:
    epoch: int
    shard_id: int
    batch_index: int
    samples: list[tuple[bytes, int]]
    recv_time: int
    stream_id: int = 0
    nbytes: int = 0


@dataclass(frozen=True)
class EndOfEpoch:
    epoch: int
    complete: bool = True
    reason: str | None = None


@dataclass
class EpochSummary:
    epoch: int
    wall_time_s: float = 0.0
    batches: int = 0
    samples: int = 0
    bytes: int = 0
    complete: bool = False
    warmup_s: float = 0.0
    start_ns: int = 0
    end_ns: int = 0
    keys: list[tuple[int, int]] = field(default_factory=list)
    matches_plan: bool | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "wall_time_s": self.wall_time_s, "batches": self.batches,
                "samples": self.samples, "bytes": self.bytes, "complete": self.complete,
                "warmup_s": self.warmup_s, "start_ns": self.start_ns, "end_ns": self.end_ns,
                "matches_plan": self.matches_plan, "error": self.error}


class PrefetchQueue:
    """FIFO of decoded batches (at most ``capacity``) and end-of-epoch markers."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._batches = 0
        self._markers = 0
        self._closed = False
        self._cv = threading.Condition()
        self.max_batches = 0

    @property
    def depth(self) -> int:
        return self._batches

    def wait_for_room(self) -> bool:
        """Block until a batch slot is free; False once the queue is closed."""
        with self._cv:
            while self._batches >= self.capacity and not self._closed:
                self._cv.wait()
            return not self._closed

    def put(self, item) -> None:
        with self._cv:
            if self._closed:
                return
            if isinstance(item, DecodedBatch):
                if self._batches >= self.capacity:
                    raise RuntimeError("prefetch queue overflow")
                self._batches += 1
                self.max_batches = max(self.max_batches, self._batches)
            else:
                self._markers += 1
            self._items.append(item)
            self._cv.notify_all()

    def wait_warm(self, n: int) -> None:
        """Block until ``n`` batches are buffered or a marker is queued."""
        with self._cv:
            while self._batches < n and not self._markers and not self._closed:
                self._cv.wait()

    def get(self, timeout: float | None = None):
        with self._cv:
            if not self._cv.wait_for(lambda: self._items or self._closed, timeout):
                raise TimeoutError("prefetch queue empty")
            if not self._items:
                return EndOfEpoch(-1, False, "receiver closed")
            item = self._items.popleft()
            if isinstance(item, DecodedBatch):
                self._batches -= 1
            else:
                self._markers -= 1
            self._cv.notify_all()
            return item

    def close(self):
        with self._cv:
            self._closed = True
            self._cv.notify_all()


class Receiver:
    def __init__(self, config: ReceiverConfig, events: EventLogger | None = None):
        self.config = config
        self.events = events
        self.queue = PrefetchQueue(config.prefetch_depth)
        self.endpoint = open_pull(config.listen_addr, config.channel, node_id=config.node_id,
                                  expected_streams=config.expected_senders)
        self.address = self.endpoint.address
        self._ends: collections.Counter = collections.Counter()
        self._thread = threading.Thread(target=self._ingest, name=f"ingest-{config.node_id}", daemon=True)
        self._thread.start()

    def _ingest(self):
        finished = 0
        while finished < self.config.epochs:
            if not self.queue.wait_for_room():
                return
            try:
                stream_id, frame = self.endpoint.recv()
            except EndOfStream:
                self.queue.put(EndOfEpoch(finished, False, "all senders closed before EPOCH_END"))
                return
            except StreamError as exc:
                self.queue.put(EndOfEpoch(finished, False, str(exc)))
                return
            except TransportError as exc:
                self.queue.put(EndOfEpoch(finished, False, str(exc)))
                return
            if frame.frame_type == BATCH:
                try:
                    epoch, shard_id, batch_index, samples = decode_batch(frame.payload, copy=False)
                except ValueError as exc:
                    self.queue.put(EndOfEpoch(finished, False, f"bad batch from stream {stream_id}: {exc}"))
                    return
                self.queue.put(DecodedBatch(epoch, shard_id, batch_index, samples, now_ns(),
                                            stream_id, len(frame.payload)))
            elif frame.frame_type == EPOCH_END:
                epoch, _ = decode_epoch_end(frame.payload)
                self._ends[epoch] += 1
                if self._ends[epoch] == self.config.expected_senders:
                    self.queue.put(EndOfEpoch(epoch))
                    finished += 1
            else:
                log.warning("ignoring frame type %d from stream %d", frame.frame_type, stream_id)

    def next(self, timeout: float | None = None):
        """Next DecodedBatch in arrival order, or an EndOfEpoch marker."""
        return self.queue.get(timeout)

    def close(self):
        self.queue.close()
        self.endpoint.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def batch_provider_next(receiver: Receiver, timeout: float | None = None):
    return receiver.next(timeout)


def simulated_compute(compute_ms: float) -> Callable[[DecodedBatch], None]:
    delay = compute_ms / 1000.0

    def step(batch: DecodedBatch) -> None:
        if delay > 0:
            time.sleep(delay)

    return step


def consume(receiver: Receiver, on_batch: Callable[[DecodedBatch], None] | None = None,
            plan: EpochPlan | None = None) -> list[EpochSummary]:
    """Run the consumer loop until every epoch has ended (or the run aborts)."""
    config = receiver.config
    on_batch = on_batch or simulated_compute(config.compute_ms)
    events, node = receiver.events, config.node_id
    summaries: dict[int, EpochSummary] = {}
    done = 0
    need_warmup = True
    while done < config.epochs:
        if need_warmup:
            t_warm = time.perf_counter()
            receiver.queue.wait_warm(config.prefetch_depth)
            warmup = time.perf_counter() - t_warm
            need_warmup = False
        wait_start = now_ns()
        item = receiver.next()
        ready = now_ns()
        if isinstance(item, EndOfEpoch):
            epoch = item.epoch if item.epoch >= 0 else done
            s = summaries.setdefault(epoch, EpochSummary(epoch, warmup_s=warmup))
            if not s.start_ns:
                s.start_ns = ready
                log_event(events, "epoch_start", (epoch, node, None, None), t=ready)
            s.end_ns = ready
            log_event(events, "epoch_end", (epoch, node, None, None), t=ready, complete=item.complete)
            s.complete = item.complete
            s.error = item.reason
            s.wall_time_s = (s.end_ns - s.start_ns) / 1e9
            done += 1
            need_warmup = True
            if not item.complete:
                break
            continue
        s = summaries.get(item.epoch)
        if s is None:
            s = summaries[item.epoch] = EpochSummary(item.epoch, warmup_s=warmup)
        if not s.start_ns:
            # the epoch timer starts at the first consume, after warm-up
            s.start_ns = wait_start
            log_event(events, "epoch_start", (item.epoch, node, None, None), t=wait_start)
        compute_start = now_ns()
        on_batch(item)
        log_event(events, "batch_recv", (item.epoch, node, item.shard_id, item.batch_index),
                  wait_start=wait_start, ready=ready, compute_start=compute_start,
                  arrived=item.recv_time, stream=item.stream_id, bytes=item.nbytes)
        s.batches += 1
        s.samples += len(item.samples)
        s.bytes += item.nbytes
        s.keys.append((item.shard_id, item.batch_index))
    if plan is not None:
        for s in summaries.values():
            want = sorted((r.shard_id, r.batch_index) for r in plan.ranges_for(s.epoch, node))
            s.matches_plan = sorted(s.keys) == want
    return [summaries[e] for e in sorted(summaries)]


def run_receiver(config: ReceiverConfig, on_batch: Callable[[DecodedBatch], None] | None = None,
                 events: EventLogger | None = None, plan: EpochPlan | None = None,
                 ready: Callable[[tuple[str, int]], None] | None = None) -> list[EpochSummary]:
    """Bind, receive ``config.epochs`` epochs, and return per-epoch summaries.

    ``ready`` is called with the bound address once the endpoint is listening.
    """
    with Receiver(config, events) as receiver:
        if ready is not None:
            ready(receiver.address)
        return consume(receiver, on_batch, plan)
