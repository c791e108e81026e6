import hashlib
import random
import threading
import time

import pytest
from hypothesis import given, settings, strategies as st

from emlio.events import EventLogger
from emlio.planner import NodeSpec, plan, plan_coverage
from emlio.receiver import (
    DecodedBatch,
    EndOfEpoch,
    Receiver,
    ReceiverConfig,
    batch_provider_next,
    consume,
    run_receiver,
)
from emlio.recordfmt import load_indexes, write_shard
from emlio.sender import (
    BatchFormatError,
    BatchRequestServer,
    SenderConfig,
    decode_batch,
    encode_batch,
    encode_epoch_end,
    encode_request,
    encoded_batch_size,
    run_sender,
)
from emlio.transport import BATCH, EPOCH_END, ChannelConfig, Frame, REQUEST, RequestChannel, open_push


class TestBatchCodec:
    def test_minimal_payload(self):
        payload = encode_batch([(b"", 5)], 0, 0, 0)
        assert len(payload) == 24
        assert decode_batch(payload) == (0, 0, 0, [(b"", 5)])

    def test_byte_accounting(self):
        records = [(bytes(65536), i) for i in range(32)]
        assert len(encode_batch(records, 1, 2, 3)) == 16 + 32 * (8 + 65536)
        assert encoded_batch_size([65536] * 32) == 16 + 32 * (8 + 65536)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.binary(max_size=300), st.integers(0, 2**32 - 1)), min_size=1, max_size=20),
           st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
    def test_roundtrip(self, records, epoch, shard, index):
        assert decode_batch(encode_batch(records, epoch, shard, index)) == (epoch, shard, index, records)

    def test_empty(self):
        with pytest.raises(ValueError):
            encode_batch([], 0, 0, 0)

    def test_over_batch_size(self):
        with pytest.raises(ValueError):
            encode_batch([(b"a", 0)] * 3, 0, 0, 0, batch_size=2)

    @pytest.mark.parametrize("cut", [3, 16, 20, 25])
    def test_truncated(self, cut):
        payload = encode_batch([(b"abcd", 1), (b"efgh", 2)], 0, 0, 0)
        with pytest.raises(BatchFormatError):
            decode_batch(payload[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(BatchFormatError):
            decode_batch(encode_batch([(b"x", 1)], 0, 0, 0) + b"\0")

    def test_zero_samples_declared(self):
        with pytest.raises(BatchFormatError):
            decode_batch(bytes(16))


@pytest.fixture
def dataset(tmp_path):
    rng = random.Random(42)
    sizes = [37, 20, 15, 30]
    for shard_id, n in enumerate(sizes):
        write_shard([(rng.randbytes(rng.randrange(10, 400)), rng.randrange(10)) for _ in range(n)],
                    shard_id, tmp_path)
    return tmp_path, load_indexes(tmp_path)


def run_pair(data_dir, indexes, B=8, E=1, T=1, Q=2, compute_ms=0.0, events=None, channel=ChannelConfig()):
    receiver = Receiver(ReceiverConfig(prefetch_depth=Q, expected_senders=T, epochs=E, node_id="n0",
                                       compute_ms=compute_ms), events)
    p = plan(indexes, [NodeSpec("n0", *receiver.address)], B, E, T, seed=3)
    out = {}

    def send():
        out["send"] = run_sender(SenderConfig(p, "n0", data_dir, channel=channel, events=events))

    t = threading.Thread(target=send)
    t.start()
    seen = []
    summaries = consume(receiver, lambda b: seen.append(b), plan=p)
    t.join(30)
    receiver.close()
    return p, out["send"], summaries, seen


class TestEndToEnd:
    def test_single_worker(self, dataset):
        data_dir, indexes = dataset
        p, sent, summaries, seen = run_pair(data_dir, indexes, B=8)
        n_batches = len(p.ranges_for(0, "n0"))
        assert sent.completed and sent.batches_sent == {0: n_batches}
        (s,) = summaries
        assert s.complete and s.batches == n_batches and s.matches_plan
        assert [(b.shard_id, b.batch_index) for b in seen] == [
            (r.shard_id, r.batch_index) for r in p.worker_ranges(0, "n0", 0)]

    def test_payloads_match_shards(self, dataset):
        from emlio.recordfmt import read_range, shard_file
        data_dir, indexes = dataset
        p, _, _, seen = run_pair(data_dir, indexes, B=8)
        by_id = {ix.shard_id: ix for ix in indexes}
        sent = set()
        for r in p.ranges_for(0, "n0"):
            ix = by_id[r.shard_id]
            recs = read_range(shard_file(ix, data_dir), ix.entries[r.first_entry:r.first_entry + r.count])
            sent.add((r.epoch, r.shard_id, r.batch_index, hashlib.sha1(repr(recs).encode()).hexdigest()))
        got = {(b.epoch, b.shard_id, b.batch_index,
                hashlib.sha1(repr([(bytes(d), label) for d, label in b.samples]).encode()).hexdigest())
               for b in seen}
        assert got == sent

    def test_two_workers_keep_per_stream_order(self, dataset):
        data_dir, indexes = dataset
        p, sent, summaries, seen = run_pair(data_dir, indexes, B=8, T=2)
        assert summaries[0].complete and summaries[0].matches_plan
        by_stream = {}
        for b in seen:
            by_stream.setdefault(b.stream_id, []).append((b.shard_id, b.batch_index))
        expected = sorted([[(r.shard_id, r.batch_index) for r in p.worker_ranges(0, "n0", w)] for w in range(2)])
        assert sorted(by_stream.values()) == expected

    def test_multi_epoch_read_once(self, dataset):
        data_dir, indexes = dataset
        p, sent, summaries, _ = run_pair(data_dir, indexes, B=8, E=3, T=2)
        assert [s.epoch for s in summaries] == [0, 1, 2]
        assert all(s.complete and s.matches_plan for s in summaries)
        assert plan_coverage(p, indexes).empty
        for e in range(3):
            assert sent.batches_sent[e] == len(p.ranges_for(e, "n0"))
        assert set(sent.reads.values()) == {1}
        assert len(sent.reads) == sum(len(p.ranges_for(e, "n0")) for e in range(3))

    def test_event_counts(self, dataset):
        data_dir, indexes = dataset
        events = EventLogger()
        p, _, _, _ = run_pair(data_dir, indexes, B=8, events=events)
        n = len(p.ranges_for(0, "n0"))
        assert len(events.events) == 2 + 2 * n
        kinds = [e["kind"] for e in events.events]
        start = next(e for e in events.events if e["kind"] == "epoch_start")
        end = next(e for e in events.events if e["kind"] == "epoch_end")
        assert end["t_ns"] >= start["t_ns"]
        assert kinds.count("batch_send") == kinds.count("batch_recv") == n
        sends = {(e["epoch"], e["shard"], e["batch"]): e["t_ns"] for e in events.events if e["kind"] == "batch_send"}
        for e in events.events:
            if e["kind"] == "batch_recv":
                assert sends[(e["epoch"], e["shard"], e["batch"])] <= e["arrived"] <= e["t_ns"]

    def test_event_log_file(self, dataset, tmp_path):
        from emlio.events import read_events
        data_dir, indexes = dataset
        path = tmp_path / "events.log"
        with EventLogger(path) as events:
            p, _, _, _ = run_pair(data_dir, indexes, B=16, events=events)
        assert len(read_events(path)) == 2 + 2 * len(p.ranges_for(0, "n0"))

    def test_receiver_unreachable(self, dataset):
        data_dir, indexes = dataset
        p = plan(indexes, [NodeSpec("n0", "127.0.0.1", 1)], 8, 1, 1, 0)
        with pytest.raises(TimeoutError):
            run_sender(SenderConfig(p, "n0", data_dir, channel=ChannelConfig(connect_timeout=0.2)))

    def test_missing_shard_aborts_with_partial_summary(self, dataset):
        data_dir, indexes = dataset
        with Receiver(ReceiverConfig(epochs=1)) as rx:
            p = plan(indexes, [NodeSpec("n0", *rx.address)], 8, 1, 1, 0)
            (data_dir / "shard_2.tfrecord").unlink()
            summary = run_sender(SenderConfig(p, "n0", data_dir))
        assert not summary.completed
        assert "shard" in summary.error.lower() or "No such file" in summary.error


class TestReceiver:
    def test_four_batches_q2(self, dataset):
        data_dir, indexes = dataset
        few = [ix for ix in indexes if ix.shard_id == 0]  # 37 records -> 4 batches of <= 10
        p, _, summaries, _ = run_pair(data_dir, few, B=10, Q=2)
        assert summaries[0].batches == 4 and summaries[0].complete

    def test_provider_next(self):
        with Receiver(ReceiverConfig(expected_senders=1)) as rx:
            with open_push(rx.address) as s:
                s.push(Frame(BATCH, encode_batch([(b"abc", 3)], 0, 1, 0)))
                item = batch_provider_next(rx, timeout=2)
                assert isinstance(item, DecodedBatch)
                assert (item.shard_id, item.samples) == (1, [(b"abc", 3)])
                s.push(Frame(EPOCH_END, encode_epoch_end(0, 0)))
                assert batch_provider_next(rx, timeout=2) == EndOfEpoch(0)

    def test_two_senders_both_epoch_ends_needed(self):
        with Receiver(ReceiverConfig(expected_senders=2)) as rx:
            a, b = open_push(rx.address), open_push(rx.address)
            for s, shard in ((a, 0), (b, 1)):
                for i in range(3):
                    s.push(Frame(BATCH, encode_batch([(b"x", 0)], 0, shard, i)))
            a.push(Frame(EPOCH_END, encode_epoch_end(0, 0)))
            items = [rx.next(timeout=2) for _ in range(6)]
            assert all(isinstance(i, DecodedBatch) for i in items)
            with pytest.raises(TimeoutError):
                rx.next(timeout=0.3)
            b.push(Frame(EPOCH_END, encode_epoch_end(0, 1)))
            assert rx.next(timeout=2) == EndOfEpoch(0)
            a.close()
            b.close()

    def test_arrival_order_is_dequeue_order(self):
        with Receiver(ReceiverConfig(expected_senders=2, prefetch_depth=64)) as rx:
            a, b = open_push(rx.address), open_push(rx.address)
            for i in range(10):
                (a if i % 2 else b).push(Frame(BATCH, encode_batch([(b"", 0)], 0, i % 2, i)))
                time.sleep(0.01)
            got = [rx.next(timeout=2) for _ in range(10)]
            assert [g.batch_index for g in got] == list(range(10))
            assert [g.recv_time for g in got] == sorted(g.recv_time for g in got)
            a.close()
            b.close()

    def test_backpressure_end_to_end(self):
        payload = encode_batch([(bytes(1000), 0)], 0, 0, 0)
        with Receiver(ReceiverConfig(prefetch_depth=4)) as rx, open_push(rx.address) as s:
            pushed = 0
            try:
                while pushed < 100:
                    s.push(Frame(BATCH, payload), timeout=0.5)
                    pushed += 1
            except TimeoutError:
                pass
            assert s.in_flight == 16
            assert rx.queue.depth == 4
            assert pushed == 16 + 4
            assert rx.queue.max_batches == 4

    def test_disconnect_before_epoch_end(self):
        cfg = ReceiverConfig(expected_senders=1, epochs=1)
        with Receiver(cfg) as rx:
            with open_push(rx.address) as s:
                s.push(Frame(BATCH, encode_batch([(b"a", 0)], 0, 0, 0)))
            (summary,) = consume(rx)
        assert summary.batches == 1 and not summary.complete

    def test_run_receiver_with_compute(self, dataset):
        data_dir, indexes = dataset
        holder = {}
        ready = threading.Event()

        def on_ready(addr):
            holder["addr"] = addr
            ready.set()

        def rx():
            holder["summ"] = run_receiver(ReceiverConfig(compute_ms=5, epochs=1, node_id="n0"), ready=on_ready)

        t = threading.Thread(target=rx)
        t.start()
        ready.wait(5)
        p = plan(indexes, [NodeSpec("n0", *holder["addr"])], 8, 1, 1, 0)
        run_sender(SenderConfig(p, "n0", data_dir))
        t.join(30)
        (s,) = holder["summ"]
        n = len(p.ranges_for(0, "n0"))
        assert s.batches == n
        assert s.wall_time_s >= n * 0.005


def test_request_server(dataset):
    from emlio.planner import BatchRange
    from emlio.recordfmt import read_range, shard_file
    data_dir, indexes = dataset
    with BatchRequestServer(data_dir) as server, RequestChannel(server.address) as ch:
        r = BatchRange(1, 4, 5, 0, 7)
        reply = ch.request(Frame(REQUEST, encode_request(r)))
        epoch, shard, idx, records = decode_batch(reply.payload)
        ix = indexes[1]
        assert (epoch, shard, idx) == (0, 1, 7)
        assert records == read_range(shard_file(ix, data_dir), ix.entries[4:9])
