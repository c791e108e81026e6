"""The storage-side daemon: read planned shard ranges, batch, serialize, push.

Batch payload layout (little-endian)::

    u32 epoch, u32 shard_id, u32 batch_index, u32 num_samples
    then per sample: u32 label, u32 data_len, data
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import struct
import sys
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from emlio.events import EventLogger, log_event, now_ns
from emlio.planner import BatchRange, EpochPlan, deserialize_plan
from emlio.recordfmt import load_indexes, map_shard, shard_file, view_range
from emlio.transport import (
    BATCH,
    EPOCH_END,
    HELLO,
    PROTOCOL_VERSION,
    REQUEST,
    ChannelConfig,
    Frame,
    TransportError,
    _size_buffers,
    decode_hello,
    encode_hello,
    open_push,
    read_frame,
    write_frame,
)

log = logging.getLogger(__name__)

_BATCH_HEADER = struct.Struct("<IIII")
_SAMPLE_HEADER = struct.Struct("<II")
_EPOCH_END = struct.Struct("<II")
_REQUEST = struct.Struct("<IIIII")


class BatchFormatError(ValueError):
    pass


def encode_batch(records, epoch: int, shard_id: int, batch_index: int,
                 batch_size: int | None = None) -> bytes:
    return b"".join(encode_batch_parts(records, epoch, shard_id, batch_index, batch_size))


def encode_batch_parts(records, epoch: int, shard_id: int, batch_index: int,
                       batch_size: int | None = None) -> list:
    """The encoded batch as a list of buffers, without joining the sample data."""
    if not records:
        raise ValueError("a batch needs at least one record")
    if batch_size is not None and len(records) > batch_size:
        raise ValueError(f"{len(records)} records exceed batch size {batch_size}")
    parts = [_BATCH_HEADER.pack(epoch, shard_id, batch_index, len(records))]
    for data, label in records:
        parts.append(_SAMPLE_HEADER.pack(label, len(data)))
        parts.append(data)
    return parts


def decode_batch(buf, copy: bool = True) -> tuple[int, int, int, list[tuple[bytes, int]]]:
    """Inverse of encode_batch: ``(epoch, shard_id, batch_index, records)``.

    With ``copy=False`` sample data are memoryviews into ``buf``.
    """
    view = memoryview(buf)
    if len(view) < _BATCH_HEADER.size:
        raise BatchFormatError("truncated batch header")
    epoch, shard_id, batch_index, n = _BATCH_HEADER.unpack_from(view)
    if n < 1:
        raise BatchFormatError("batch declares zero samples")
    pos = _BATCH_HEADER.size
    records = []
    for i in range(n):
        if pos + _SAMPLE_HEADER.size > len(view):
            raise BatchFormatError(f"truncated header of sample {i}")
        label, size = _SAMPLE_HEADER.unpack_from(view, pos)
        pos += _SAMPLE_HEADER.size
        if pos + size > len(view):
            raise BatchFormatError(f"sample {i} claims {size} bytes past the end of the payload")
        data = view[pos:pos + size]
        records.append((data.tobytes() if copy else data, label))
        pos += size
    if pos != len(view):
        raise BatchFormatError(f"{len(view) - pos} trailing bytes after {n} samples")
    return epoch, shard_id, batch_index, records


def encoded_batch_size(sizes) -> int:
    return _BATCH_HEADER.size + sum(_SAMPLE_HEADER.size + s for s in sizes)


def encode_epoch_end(epoch: int, worker: int) -> bytes:
    return _EPOCH_END.pack(epoch, worker)


def decode_epoch_end(payload) -> tuple[int, int]:
    if len(payload) != _EPOCH_END.size:
        raise BatchFormatError("malformed EPOCH_END payload")
    return _EPOCH_END.unpack(payload)


def encode_request(r: BatchRange) -> bytes:
    return _REQUEST.pack(r.epoch, r.shard_id, r.first_entry, r.count, r.batch_index)


def decode_request(payload) -> BatchRange:
    if len(payload) != _REQUEST.size:
        raise BatchFormatError("malformed REQUEST payload")
    epoch, shard, first, count, idx = _REQUEST.unpack(payload)
    return BatchRange(shard, first, count, epoch, idx)


class ShardStore:
    """Index lookups and contiguous range reads over one dataset directory.

    Shards are memory-mapped on first use, so batch payloads go from the
    page cache to the socket without an intermediate read buffer.
    """

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.indexes = {ix.shard_id: ix for ix in load_indexes(data_dir)}
        self.reads: Counter = Counter()
        self._lock = threading.Lock()
        self._maps: dict[int, memoryview] = {}

    def _mapped(self, ix) -> memoryview:
        with self._lock:
            view = self._maps.get(ix.shard_id)
            if view is None:
                view = self._maps[ix.shard_id] = map_shard(shard_file(ix, self.data_dir))
            return view

    def read(self, r: BatchRange) -> list[tuple[memoryview, int]]:
        ix = self.indexes.get(r.shard_id)
        if ix is None:
            raise FileNotFoundError(f"shard {r.shard_id} not found in {self.data_dir}")
        entries = ix.entries[r.first_entry:r.first_entry + r.count]
        if len(entries) != r.count or r.count < 1:
            raise ValueError(f"range {r} is outside shard {r.shard_id}")
        with self._lock:
            self.reads[(r.epoch, r.shard_id, r.first_entry)] += 1
        return view_range(self._mapped(ix), entries)

    def encoded(self, r: BatchRange) -> list:
        """The batch for ``r`` as buffer pieces; ``b"".join`` gives the payload."""
        return encode_batch_parts(self.read(r), r.epoch, r.shard_id, r.batch_index)


@dataclass
class SenderConfig:
    plan: EpochPlan | str | Path
    node_id: str
    data_dir: str | Path
    workers: int | None = None          # defaults to the plan's threads per node
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    worker_ids: list[int] | None = None  # serve only these workers of the node
    events: EventLogger | None = None
    target: tuple[str, int] | None = None  # overrides the node address from the plan
    reader_nice: int = 5  # read-ahead runs this much nicer than the pushing threads


@dataclass
class SendSummary:
    node_id: str
    batches_sent: dict[int, int] = field(default_factory=dict)
    bytes_sent: int = 0
    wall_time_s: float = 0.0
    reads: Counter = field(default_factory=Counter)
    completed: bool = False
    error: str | None = None

    def to_json(self) -> dict:
        return {"node_id": self.node_id, "batches_sent": {str(k): v for k, v in self.batches_sent.items()},
                "bytes_sent": self.bytes_sent, "wall_time_s": self.wall_time_s,
                "completed": self.completed, "error": self.error}


def _load_plan(p) -> EpochPlan:
    if isinstance(p, EpochPlan):
        return p
    return deserialize_plan(Path(p).read_bytes())


_DONE = object()


def _lower_priority(nice: int) -> None:
    """Raise the calling thread's nice value (Linux only, where nice is per thread).

    Read-ahead is background work: when the CPU is short, sending the batch
    the receiver needs next should win over reading one further ahead.
    """
    if nice <= 0 or not sys.platform.startswith("linux"):
        return
    try:
        tid = threading.get_native_id()
        os.setpriority(os.PRIO_PROCESS, tid, os.getpriority(os.PRIO_PROCESS, tid) + nice)
    except OSError:
        pass


class _Worker:
    def __init__(self, index, stream, ranges_by_epoch, store, summary, lock, events, node_id,
                 reader_nice=0):
        self.index = index
        self.stream = stream
        self.ranges_by_epoch = ranges_by_epoch
        self.store = store
        self.summary = summary
        self.lock = lock
        self.events = events
        self.node_id = node_id
        self.reader_nice = reader_nice
        self.error: Exception | None = None

    def _produce(self, ranges, staging: queue.Queue, stop: threading.Event):
        # read+encode of batch k+1 overlaps the push of batch k
        _lower_priority(self.reader_nice)
        try:
            for r in ranges:
                if stop.is_set():
                    return
                staging.put((r, self.store.encoded(r)))
        except Exception as exc:
            staging.put(exc)
            return
        staging.put(_DONE)

    def run_epoch(self, epoch: int):
        ranges = self.ranges_by_epoch.get(epoch, ())
        staging: queue.Queue = queue.Queue(maxsize=1)
        stop = threading.Event()
        producer = threading.Thread(target=self._produce, args=(ranges, staging, stop),
                                    name=f"read-{self.node_id}-w{self.index}", daemon=True)
        producer.start()
        try:
            while True:
                item = staging.get()
                if item is _DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                r, payload = item
                frame = Frame(BATCH, payload)
                t_send = now_ns()
                self.stream.push(frame)
                log_event(self.events, "batch_send", (epoch, self.node_id, r.shard_id, r.batch_index),
                          t=t_send, pushed_ns=now_ns(), worker=self.index, bytes=frame.size)
                with self.lock:
                    self.summary.batches_sent[epoch] = self.summary.batches_sent.get(epoch, 0) + 1
                    self.summary.bytes_sent += frame.size
            self.stream.push(Frame(EPOCH_END, encode_epoch_end(epoch, self.index)))
        finally:
            stop.set()
            while producer.is_alive():
                try:
                    staging.get_nowait()
                except queue.Empty:
                    producer.join(0.01)


def run_sender(config: SenderConfig) -> SendSummary:
    """Send one node's planned batches, epoch by epoch, over one stream per worker.

    Workers meet at a barrier between epochs.  On a mid-run failure the
    partial summary is returned with ``completed=False`` and ``error`` set.
    """
    plan = _load_plan(config.plan)
    node = plan.node(config.node_id)
    n_workers = config.workers or plan.threads_per_node
    worker_ids = config.worker_ids if config.worker_ids is not None else list(range(n_workers))
    store = ShardStore(config.data_dir)
    summary = SendSummary(config.node_id, batches_sent={e: 0 for e in range(plan.epochs)})
    target = config.target or node.address

    t0 = time.perf_counter()
    streams = []
    try:
        for w in worker_ids:
            streams.append(open_push(target, config.channel, node_id=f"{config.node_id}/w{w}"))
    except Exception:
        for s in streams:
            s.close(timeout=1)
        raise

    lock = threading.Lock()
    barrier = threading.Barrier(len(worker_ids))
    workers = []
    for w, stream in zip(worker_ids, streams):
        by_epoch = {e: plan.worker_ranges(e, config.node_id, w) for e in range(plan.epochs)}
        workers.append(_Worker(w, stream, by_epoch, store, summary, lock, config.events, config.node_id,
                               config.reader_nice))

    def drive(worker: _Worker):
        try:
            for epoch in range(plan.epochs):
                worker.run_epoch(epoch)
                barrier.wait()
        except threading.BrokenBarrierError:
            pass
        except Exception as exc:
            worker.error = exc
            barrier.abort()

    threads = [threading.Thread(target=drive, args=(w,), name=f"send-{config.node_id}-w{w.index}")
               for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    errors = [w.error for w in workers if w.error is not None]
    for s in streams:
        s.close(timeout=5 if not errors else 0.5)
    summary.wall_time_s = time.perf_counter() - t0
    summary.reads = store.reads
    if errors:
        summary.error = f"{type(errors[0]).__name__}: {errors[0]}"
        log.error("sender %s aborted: %s", config.node_id, summary.error)
    else:
        summary.completed = True
    return summary


class BatchRequestServer:
    """Answers one REQUEST frame with one BATCH frame, synchronously per connection.

    This is the storage side of the request/response baseline loader.
    """

    def __init__(self, data_dir, listen_addr=("127.0.0.1", 0), node_id: str = "storage",
                 events: EventLogger | None = None):
        self.store = ShardStore(data_dir)
        self.node_id = node_id
        self.events = events
        self._listener = socket.create_server(tuple(listen_addr))
        _size_buffers(self._listener, ChannelConfig().socket_buffer)
        self.address = self._listener.getsockname()[:2]
        self._closed = False
        self._conns: list[socket.socket] = []
        self._next_id = 1
        self._thread = threading.Thread(target=self._accept, name="request-server", daemon=True)
        self._thread.start()

    def _accept(self):
        while not self._closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(sock)
            stream_id, self._next_id = self._next_id, self._next_id + 1
            threading.Thread(target=self._serve, args=(sock, stream_id), daemon=True).start()

    def _serve(self, sock, stream_id):
        try:
            hello = read_frame(sock, 1 << 16)
            version, _, _ = decode_hello(hello.payload)
            if hello.frame_type != HELLO or version != PROTOCOL_VERSION:
                write_frame(sock, Frame(HELLO, encode_hello(0, self.node_id)))
                return
            write_frame(sock, Frame(HELLO, encode_hello(stream_id, self.node_id)))
            while True:
                frame = read_frame(sock)
                if frame.frame_type != REQUEST:
                    raise TransportError(f"expected REQUEST, got frame type {frame.frame_type}")
                r = decode_request(frame.payload)
                frame = Frame(BATCH, self.store.encoded(r))
                log_event(self.events, "batch_send", (r.epoch, self.node_id, r.shard_id, r.batch_index),
                          bytes=frame.size)
                write_frame(sock, frame)
        except (OSError, TransportError, ValueError) as exc:
            log.debug("request connection %d ended: %s", stream_id, exc)
        finally:
            sock.close()

    def close(self):
        self._closed = True
        self._listener.close()
        for s in self._conns:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
