"""Framed push/pull byte streams with credit-based backpressure.

Wire frame (little-endian)::

    4s   magic "EML1"
    u8   frame type (0 BATCH, 1 EPOCH_END, 2 HELLO, 3 REQUEST)
    u32  payload length
    ...  payload
    u32  crc32c(payload)

A push stream may have at most ``hwm`` BATCH frames that the receiving side
has not yet handed to its consumer.  The receiver returns one credit byte
(0xC7) per BATCH frame delivered by ``PullEndpoint.recv``; ``push`` blocks
while the window is full.

Latency injection lives on the pushing side of a link: outbound frames and
inbound credits each pass through a delay line of ``one_way_delay_ms``, so
frames stay pipelined while every round trip costs twice the one-way delay.
"""

from __future__ import annotations

import collections
import dataclasses
import itertools
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from emlio.checksum import crc32c

log = logging.getLogger(__name__)

MAGIC = b"EML1"
PROTOCOL_VERSION = 1
CREDIT = 0xC7
_LARGE = 1 << 16

BATCH, EPOCH_END, HELLO, REQUEST = 0, 1, 2, 3
FRAME_TYPES = (BATCH, EPOCH_END, HELLO, REQUEST)

_HEADER = struct.Struct("<4sBI")
_IOV_MAX = 512
_CRC = struct.Struct("<I")
_HELLO = struct.Struct("<HIH")
FRAME_OVERHEAD = _HEADER.size + _CRC.size


class TransportError(Exception):
    pass


class ConnectTimeout(TransportError, TimeoutError):
    pass


class PushTimeout(TransportError, TimeoutError):
    pass


class ProtocolError(TransportError):
    pass


class FrameCorrupt(ProtocolError):
    pass


class ChannelClosed(TransportError):
    pass


class EndOfStream(TransportError):
    """Every stream of a pull endpoint has closed and all frames were delivered."""


class StreamError(TransportError):
    def __init__(self, stream_id: int, cause: Exception):
        super().__init__(f"stream {stream_id}: {cause}")
        self.stream_id = stream_id
        self.cause = cause


@dataclass(frozen=True)
class Frame:
    """``payload`` is bytes-like, or a list/tuple of bytes-like pieces sent back to back."""

    frame_type: int
    payload: bytes = b""

    @property
    def size(self) -> int:
        if isinstance(self.payload, (list, tuple)):
            return sum(memoryview(p).nbytes for p in self.payload)
        return memoryview(self.payload).nbytes


@dataclass(frozen=True)
class ChannelConfig:
    hwm: int = 16
    connect_timeout: float = 5.0
    one_way_delay_ms: float = 0.0
    max_frame_bytes: int = 1 << 30
    socket_buffer: int = 0  # SO_SNDBUF/SO_RCVBUF request; 0 keeps the OS default

    def __post_init__(self):
        if self.hwm < 1:
            raise ValueError("hwm must be >= 1")
        if self.one_way_delay_ms < 0:
            raise ValueError("one_way_delay_ms must be >= 0")


def with_injected_delay(config: ChannelConfig, one_way_ms: float) -> ChannelConfig:
    if one_way_ms < 0:
        raise ValueError("one_way_ms must be >= 0")
    return dataclasses.replace(config, one_way_delay_ms=float(one_way_ms))


def frame_parts(frame: Frame) -> tuple:
    """Header, payload piece(s) and trailer of ``frame``, ready for a gathered write."""
    if frame.frame_type not in FRAME_TYPES:
        raise ValueError(f"unknown frame type {frame.frame_type}")
    pieces = tuple(frame.payload) if isinstance(frame.payload, (list, tuple)) else (frame.payload,)
    crc = 0
    for piece in pieces:
        crc = crc32c(piece, crc)
    return (_HEADER.pack(MAGIC, frame.frame_type, frame.size), *pieces, _CRC.pack(crc))


def _send_parts(sock: socket.socket, parts) -> None:
    """sendall for a list of buffers, using scatter-gather writes."""
    views = [memoryview(p).cast("B") for p in parts if len(p)]
    while views:
        sent = sock.sendmsg(views[:_IOV_MAX])
        while sent and views:
            if sent >= views[0].nbytes:
                sent -= views[0].nbytes
                views.pop(0)
            else:
                views[0] = views[0][sent:]
                sent = 0


def encode_frame(frame: Frame) -> bytes:
    return b"".join(frame_parts(frame))


def encode_hello(stream_id: int, node_id: str, version: int = PROTOCOL_VERSION) -> bytes:
    name = node_id.encode()
    return _HELLO.pack(version, stream_id, len(name)) + name


def decode_hello(payload) -> tuple[int, int, str]:
    if len(payload) < _HELLO.size:
        raise ProtocolError("short HELLO")
    version, stream_id, n = _HELLO.unpack_from(payload)
    if len(payload) != _HELLO.size + n:
        raise ProtocolError("HELLO node id length mismatch")
    return version, stream_id, bytes(payload[_HELLO.size:]).decode()


def _recv_exact(sock: socket.socket, n: int):
    # big payloads skip the zero fill; recv overwrites every byte anyway
    buf = bytearray(n) if n < _LARGE else memoryview(np.empty(n, np.uint8))
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got, socket.MSG_WAITALL)
        if k == 0:
            raise ChannelClosed("peer closed the connection" if got == 0 else "connection closed mid-frame")
        got += k
    return buf


def read_frame(sock: socket.socket, max_bytes: int = 1 << 30) -> Frame:
    """Read one frame; raises ChannelClosed on clean EOF before a header."""
    magic, frame_type, n = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if frame_type not in FRAME_TYPES:
        raise ProtocolError(f"unknown frame type {frame_type}")
    if n > max_bytes:
        raise ProtocolError(f"frame of {n} bytes exceeds limit {max_bytes}")
    payload = _recv_exact(sock, n) if n else bytearray()
    (crc,) = _CRC.unpack(_recv_exact(sock, _CRC.size))
    if crc32c(payload) != crc:
        raise FrameCorrupt("payload CRC mismatch")
    return Frame(frame_type, payload)


def write_frame(sock: socket.socket, frame: Frame) -> None:
    _send_parts(sock, frame_parts(frame))


class DelayLine:
    """Runs callbacks in FIFO order, each ``delay`` seconds after submission.

    Items overlap in flight: a delay line adds latency, not serialization.
    With zero delay callbacks run inline.
    """

    def __init__(self, delay: float, name: str = "delay-line"):
        self.delay = delay
        self._items: collections.deque = collections.deque()
        self._cv = threading.Condition()
        self._closed = False
        self._busy = False
        self._thread = None
        if delay > 0:
            self._thread = threading.Thread(target=self._run, name=name, daemon=True)
            self._thread.start()

    def submit(self, fn: Callable[[], None]) -> None:
        if self._thread is None:
            fn()
            return
        with self._cv:
            if self._closed:
                raise ChannelClosed("delay line closed")
            self._items.append((time.monotonic() + self.delay, fn))
            self._cv.notify()

    def pending(self) -> int:
        return len(self._items)

    def _run(self):
        while True:
            with self._cv:
                while not self._items and not self._closed:
                    self._cv.wait()
                if not self._items:
                    return
                due, fn = self._items[0]
            wait = due - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            with self._cv:
                if self._closed or not self._items:
                    return
                self._items.popleft()
                self._busy = True
            try:
                fn()
            except Exception:  # the callback records its own failure
                log.debug("delay line callback failed", exc_info=True)
            finally:
                with self._cv:
                    self._busy = False
                    self._cv.notify_all()

    def drain(self, timeout: float | None = None) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while self._items or self._busy:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    break
                self._cv.wait(remaining)

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._items.clear()
            self._cv.notify_all()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join()


def _size_buffers(sock: socket.socket, size: int) -> None:
    # a whole batch frame fits in the socket buffers, so it crosses in few wakeups
    if size:
        for opt in (socket.SO_SNDBUF, socket.SO_RCVBUF):
            try:
                sock.setsockopt(socket.SOL_SOCKET, opt, size)
            except OSError:
                pass


def _connect(address, timeout: float, buffer_size: int = 0) -> socket.socket:
    deadline = time.monotonic() + timeout
    last = None
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise ConnectTimeout(f"could not connect to {address[0]}:{address[1]} within {timeout}s: {last}")
        sock = socket.socket(socket.AF_INET6 if ":" in address[0] else socket.AF_INET)
        _size_buffers(sock, buffer_size)
        sock.settimeout(min(remaining, 1.0))
        try:
            sock.connect(tuple(address))
        except OSError as exc:
            sock.close()
            last = exc
            time.sleep(min(0.05, max(remaining, 0)))
            continue
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock


def _handshake(sock, node_id: str, delay: float, version: int) -> tuple[int, str]:
    if delay:
        time.sleep(delay)
    write_frame(sock, Frame(HELLO, encode_hello(0, node_id, version)))
    reply = read_frame(sock)
    if delay:
        time.sleep(delay)
    if reply.frame_type != HELLO:
        raise ProtocolError("expected HELLO reply")
    peer_version, stream_id, peer_id = decode_hello(reply.payload)
    if peer_version != version or stream_id == 0:
        raise ProtocolError(f"protocol version mismatch: local {version}, peer {peer_version}")
    return stream_id, peer_id


def _soonest(a: float | None, b: float | None) -> float | None:
    if a is None:
        return b
    return a if b is None else min(a, b)


class PushStream:
    """Sending half of one stream; owned by a single worker."""

    def __init__(self, sock: socket.socket, stream_id: int, peer_id: str, config: ChannelConfig):
        self.stream_id = stream_id
        self.peer_id = peer_id
        self.config = config
        self._sock = sock
        self._cv = threading.Condition()
        self._in_flight = 0
        self._error: Exception | None = None
        self._closing = False
        self.max_in_flight = 0
        self.frames_sent = 0
        self.bytes_sent = 0
        self.buffered_bytes = 0
        self.max_buffered_bytes = 0
        delay = config.one_way_delay_ms / 1000.0
        self._delay = delay
        self._out = DelayLine(delay, f"push-{stream_id}-out")
        # credits become usable one delay after they arrive; applied lazily
        self._pending_credits: collections.deque = collections.deque()
        self._reader = threading.Thread(target=self._read_credits, name=f"push-{stream_id}-reader", daemon=True)
        self._reader.start()

    @property
    def in_flight(self) -> int:
        with self._cv:
            self._apply_credits()
            return self._in_flight

    def _apply_credits(self) -> float | None:
        """Apply due credits; return seconds until the next one is due."""
        now = time.monotonic()
        while self._pending_credits and self._pending_credits[0][0] <= now:
            _, k = self._pending_credits.popleft()
            self._in_flight = max(0, self._in_flight - k)
        return self._pending_credits[0][0] - now if self._pending_credits else None

    def _fail(self, exc: Exception):
        with self._cv:
            if self._error is None:
                self._error = exc
            self._cv.notify_all()

    def _add_credits(self, k: int):
        with self._cv:
            self._pending_credits.append((time.monotonic() + self._delay, k))
            self._cv.notify_all()

    def _read_credits(self):
        try:
            while True:
                data = self._sock.recv(4096)
                if not data:
                    raise ChannelClosed("receiver closed the stream")
                if data.count(CREDIT) != len(data):
                    raise ProtocolError("unexpected bytes on credit path")
                k = len(data)
                self._add_credits(k)
        except OSError as exc:
            self._fail(ChannelClosed(f"receiver disconnected: {exc}"))
        except TransportError as exc:
            if not self._closing:
                self._fail(exc)
            else:
                self._fail(ChannelClosed("stream closed"))

    def _send(self, parts, size):
        try:
            _send_parts(self._sock, parts)
        except OSError as exc:
            self._fail(ChannelClosed(f"receiver disconnected: {exc}"))
        finally:
            with self._cv:
                self.buffered_bytes -= size

    def push(self, frame: Frame, timeout: float | None = None) -> None:
        """Hand ``frame`` to the stream, blocking while the window is full."""
        deadline = None if timeout is None else time.monotonic() + timeout
        parts = frame_parts(frame)
        size = sum(memoryview(p).nbytes for p in parts)
        with self._cv:
            if frame.frame_type == BATCH:
                while self._error is None:
                    next_due = self._apply_credits()
                    if self._in_flight < self.config.hwm:
                        break
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        raise PushTimeout(f"window of {self.config.hwm} full for {timeout}s")
                    self._cv.wait(_soonest(remaining, next_due))
            if self._error is not None:
                raise self._error
            if frame.frame_type == BATCH:
                self._in_flight += 1
                self.max_in_flight = max(self.max_in_flight, self._in_flight)
            self.buffered_bytes += size
            self.max_buffered_bytes = max(self.max_buffered_bytes, self.buffered_bytes)
        self.frames_sent += 1
        self.bytes_sent += size
        self._out.submit(lambda: self._send(parts, size))

    def wait_drained(self, timeout: float | None = None) -> bool:
        """Wait until every pushed BATCH frame has been credited back."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while self._error is None:
                next_due = self._apply_credits()
                if not self._in_flight:
                    break
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return False
                self._cv.wait(_soonest(remaining, next_due))
            return self._in_flight == 0

    def close(self, timeout: float = 10.0) -> None:
        """Flush delayed frames, half-close, and wait for the peer to finish reading."""
        if self._closing:
            return
        self._closing = True
        self._out.drain(timeout)
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._reader.join(timeout)
        self._out.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_push(remote, config: ChannelConfig = ChannelConfig(), node_id: str = "",
              version: int = PROTOCOL_VERSION) -> PushStream:
    """Connect to a pull endpoint (retrying until ``connect_timeout``) and exchange HELLO.

    ``remote`` is a NodeSpec or an ``(ip, port)`` pair.
    """
    address = remote.address if hasattr(remote, "address") else tuple(remote)
    sock = _connect(address, config.connect_timeout, config.socket_buffer)
    try:
        stream_id, peer_id = _handshake(sock, node_id, config.one_way_delay_ms / 1000.0, version)
    except (OSError, TransportError):
        sock.close()
        raise
    return PushStream(sock, stream_id, peer_id, config)


class _Inbound:
    def __init__(self, stream_id, sock, peer_id):
        self.stream_id = stream_id
        self.sock = sock
        self.peer_id = peer_id
        self.open = True
        self.buffered_bytes = 0
        self.max_buffered_bytes = 0
        self.frames = 0
        self.lock = threading.Lock()


_CLOSED = object()


class PullEndpoint:
    """Receiving side: accepts any number of push streams and fans them in.

    ``recv`` must be called from a single consumer thread.
    """

    def __init__(self, listen_addr=("127.0.0.1", 0), config: ChannelConfig = ChannelConfig(),
                 node_id: str = "", expected_streams: int | None = None):
        self.config = config
        self.node_id = node_id
        self.expected_streams = expected_streams
        self._listener = socket.create_server(tuple(listen_addr), reuse_port=False)
        _size_buffers(self._listener, config.socket_buffer)
        self.address = self._listener.getsockname()[:2]
        self._inbox: queue.Queue = queue.Queue()
        self._streams: dict[int, _Inbound] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._closed = False
        self._threads: list[threading.Thread] = []
        self._accepter = threading.Thread(target=self._accept_loop, name="pull-accept", daemon=True)
        self._accepter.start()

    @property
    def streams(self) -> dict[int, _Inbound]:
        return dict(self._streams)

    def _accept_loop(self):
        while not self._closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve, args=(sock,), name="pull-ingest", daemon=True)
            self._threads.append(t)
            t.start()

    def _serve(self, sock):
        try:
            sock.settimeout(max(self.config.connect_timeout, 1.0))
            hello = read_frame(sock, 1 << 16)
            if hello.frame_type != HELLO:
                raise ProtocolError("expected HELLO")
            version, _, peer_id = decode_hello(hello.payload)
            if version != PROTOCOL_VERSION:
                write_frame(sock, Frame(HELLO, encode_hello(0, self.node_id)))
                raise ProtocolError(f"peer speaks protocol {version}")
            with self._lock:
                if self._closed:
                    raise ChannelClosed("endpoint closed")
                stream_id = next(self._ids)
                inbound = _Inbound(stream_id, sock, peer_id)
                self._streams[stream_id] = inbound
            write_frame(sock, Frame(HELLO, encode_hello(stream_id, self.node_id)))
            sock.settimeout(None)
        except (OSError, TransportError) as exc:
            log.warning("rejected stream: %s", exc)
            sock.close()
            return
        self._ingest(inbound)

    def _ingest(self, inbound: _Inbound):
        try:
            while True:
                frame = read_frame(inbound.sock, self.config.max_frame_bytes)
                size = len(frame.payload)
                with inbound.lock:
                    inbound.buffered_bytes += size
                    inbound.max_buffered_bytes = max(inbound.max_buffered_bytes, inbound.buffered_bytes)
                    inbound.frames += 1
                self._inbox.put((inbound.stream_id, frame))
        except ChannelClosed:
            pass
        except (OSError, TransportError) as exc:
            if not self._closed:
                self._inbox.put((inbound.stream_id, StreamError(inbound.stream_id, exc)))
        inbound.open = False
        try:
            inbound.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        inbound.sock.close()
        self._inbox.put((inbound.stream_id, _CLOSED))

    def _all_done(self) -> bool:
        with self._lock:
            streams = list(self._streams.values())
        need = self.expected_streams or 1
        return len(streams) >= need and not any(s.open for s in streams)

    def recv(self, timeout: float | None = None) -> tuple[int, Frame]:
        """Next frame from any stream, in arrival order.

        Raises EndOfStream once all streams have closed and drained, and
        StreamError for a stream that failed (for example a corrupt frame).
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self._inbox.empty() and self._all_done():
                raise EndOfStream()
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise TimeoutError("no frame within timeout")
            try:
                # short polls so a concurrent close is noticed
                stream_id, item = self._inbox.get(timeout=0.05 if remaining is None else min(remaining, 0.05))
            except queue.Empty:
                if self._closed:
                    raise EndOfStream()
                continue
            if item is _CLOSED:
                continue
            if isinstance(item, StreamError):
                raise item
            inbound = self._streams[stream_id]
            with inbound.lock:
                inbound.buffered_bytes -= len(item.payload)
            if item.frame_type == BATCH and inbound.open:
                try:
                    inbound.sock.send(bytes([CREDIT]))
                except OSError:
                    pass
            return stream_id, item

    def close(self):
        """Abort: close the listener and every stream (peers see a reset)."""
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            streams = list(self._streams.values())
        for s in streams:
            try:
                s.sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
                # shutdown wakes the ingest thread blocked in recv; close alone does not
                s.sock.shutdown(socket.SHUT_RDWR)
                s.sock.close()
            except OSError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_pull(listen_addr=("127.0.0.1", 0), config: ChannelConfig = ChannelConfig(),
              node_id: str = "", expected_streams: int | None = None) -> PullEndpoint:
    return PullEndpoint(listen_addr, config, node_id, expected_streams)


def recv(endpoint: PullEndpoint, timeout: float | None = None) -> tuple[int, Frame]:
    return endpoint.recv(timeout)


def push(stream: PushStream, frame: Frame, timeout: float | None = None) -> None:
    stream.push(frame, timeout)


class RequestChannel:
    """Synchronous request/response client; pays the injected delay both ways."""

    def __init__(self, remote, config: ChannelConfig = ChannelConfig(), node_id: str = ""):
        address = remote.address if hasattr(remote, "address") else tuple(remote)
        self.config = config
        self._delay = config.one_way_delay_ms / 1000.0
        self._sock = _connect(address, config.connect_timeout, config.socket_buffer)
        try:
            self.stream_id, self.peer_id = _handshake(self._sock, node_id, self._delay, PROTOCOL_VERSION)
        except (OSError, TransportError):
            self._sock.close()
            raise

    def request(self, frame: Frame) -> Frame:
        if self._delay:
            time.sleep(self._delay)
        try:
            write_frame(self._sock, frame)
            reply = read_frame(self._sock, self.config.max_frame_bytes)
        except OSError as exc:
            raise ChannelClosed(f"server disconnected: {exc}") from exc
        if self._delay:
            time.sleep(self._delay)
        return reply

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
