import json
import os
import random
import struct

import pytest
from hypothesis import given, settings, strategies as st

from emlio import checksum
from emlio.recordfmt import (
    FRAME_OVERHEAD,
    CorruptRecordError,
    IndexFormatError,
    RecordEntry,
    build_label_map,
    convert_dataset,
    iter_records,
    load_indexes,
    parse_index,
    read_index,
    read_range,
    shard_file,
    write_shard,
)


def bitwise_crc32c(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0x82F63B78 * (crc & 1))
    return crc ^ 0xFFFFFFFF


class TestChecksum:
    def test_check_value(self):
        assert checksum.crc32c(b"123456789") == 0xE3069283

    def test_empty(self):
        assert checksum.crc32c(b"") == 0

    @pytest.mark.parametrize("n", [1, 7, 8, 9, 63, 64, 65, 1000, 70000])
    def test_matches_bitwise(self, n):
        data = random.Random(n).randbytes(n)
        assert checksum.crc32c(data) == bitwise_crc32c(data)

    def test_python_fallback_agrees(self):
        data = random.Random(1).randbytes(3000)
        assert checksum._crc32c_py(data) == checksum.crc32c(data)

    def test_continuation(self):
        data = b"hello, world"
        assert checksum.crc32c(data[5:], checksum.crc32c(data[:5])) == checksum.crc32c(data)

    @given(st.integers(0, 2**32 - 1))
    def test_mask_roundtrip(self, crc):
        assert checksum.unmask(checksum.mask(crc)) == crc

    def test_mask_formula(self):
        crc = 0x12345678
        rotated = ((crc >> 15) | (crc << 17)) & 0xFFFFFFFF
        assert checksum.mask(crc) == (rotated + 0xA282EAD8) & 0xFFFFFFFF


class TestWriteShard:
    def test_empty_payload_is_16_bytes(self, tmp_path):
        ix = write_shard([(b"", 0)], 0, tmp_path)
        assert os.path.getsize(shard_file(ix, tmp_path)) == 16
        assert ix.entries == (RecordEntry(0, 0, 0),)

    def test_offsets(self, tmp_path):
        ix = write_shard([(b"a" * 10, 1), (b"b" * 20, 2), (b"c" * 30, 3)], 4, tmp_path)
        assert [e.offset for e in ix.entries] == [0, 26, 62]
        assert ix.total_samples == 3
        assert (tmp_path / "mapping_shard_4.json").exists()

    def test_byte_layout(self, tmp_path):
        ix = write_shard([(b"xyz", 9)], 1, tmp_path)
        raw = open(shard_file(ix, tmp_path), "rb").read()
        assert raw[:8] == struct.pack("<Q", 3)
        assert struct.unpack("<I", raw[8:12])[0] == checksum.mask(bitwise_crc32c(raw[:8]))
        assert raw[12:15] == b"xyz"
        assert struct.unpack("<I", raw[15:])[0] == checksum.mask(bitwise_crc32c(b"xyz"))

    def test_empty_sample_list(self, tmp_path):
        with pytest.raises(ValueError):
            write_shard([], 0, tmp_path)

    def test_tensorflow_reader_cross_check(self, tmp_path):
        tf = pytest.importorskip("tensorflow")
        rng = random.Random(3)
        samples = [(rng.randbytes(rng.randrange(0, 5000)), i) for i in range(50)]
        ix = write_shard(samples, 0, tmp_path)
        got = [r.numpy() for r in tf.data.TFRecordDataset(shard_file(ix, tmp_path))]
        assert got == [s for s, _ in samples]


class TestReadIndex:
    def test_roundtrip(self, tmp_path):
        ix = write_shard([(b"a" * 10, 1), (b"b" * 20, 2)], 7, tmp_path)
        assert read_index(tmp_path / "mapping_shard_7.json") == ix

    def test_out_of_order(self, tmp_path):
        doc = {"shard_id": 0, "shard_file": "s",
               "records": [{"offset": 26, "size": 5, "label": 0}, {"offset": 0, "size": 10, "label": 0}]}
        p = tmp_path / "i.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(IndexFormatError):
            read_index(p)

    def test_overlap(self):
        doc = {"shard_id": 0, "shard_file": "s",
               "records": [{"offset": 0, "size": 10, "label": 0}, {"offset": 20, "size": 1, "label": 0}]}
        with pytest.raises(IndexFormatError):
            parse_index(doc)

    def test_hand_built_100(self):
        records, off = [], 0
        for i in range(100):
            records.append({"offset": off, "size": i, "label": i % 5})
            off += i + FRAME_OVERHEAD
        ix = parse_index({"shard_id": 3, "shard_file": "x.tfrecord", "records": records})
        assert ix.total_samples == 100

    @pytest.mark.parametrize("doc", [
        {"shard_id": 0, "shard_file": "s", "records": [], "extra": 1},
        {"shard_id": 0, "shard_file": "s"},
        {"shard_id": "0", "shard_file": "s", "records": []},
        {"shard_id": True, "shard_file": "s", "records": []},
        {"shard_id": 0, "shard_file": "s", "records": [{"offset": 0, "size": 1}]},
        {"shard_id": 0, "shard_file": "s", "records": [{"offset": 0, "size": 1, "label": -1}]},
        {"shard_id": 0, "shard_file": "s", "records": [{"offset": 0, "size": 1.5, "label": 0}]},
        [],
    ])
    def test_schema_violations(self, doc):
        with pytest.raises(IndexFormatError):
            parse_index(doc)

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "i.json"
        p.write_text("{not json")
        with pytest.raises(IndexFormatError):
            read_index(p)

    def test_load_indexes_and_label_map(self, tmp_path):
        write_shard([(b"a", 4), (b"b", 5)], 1, tmp_path)
        write_shard([(b"c", 6)], 0, tmp_path)
        indexes = load_indexes(tmp_path)
        assert [ix.shard_id for ix in indexes] == [0, 1]
        assert build_label_map(indexes).tolist() == [6, 4, 5]


class TestReadRange:
    @pytest.fixture
    def shard(self, tmp_path):
        samples = [(b"first", 0), (b"second!", 1), (b"third..", 2)]
        ix = write_shard(samples, 0, tmp_path)
        return samples, ix, shard_file(ix, tmp_path)

    def test_all(self, shard):
        samples, ix, path = shard
        assert read_range(path, ix.entries) == samples

    def test_middle(self, shard):
        samples, ix, path = shard
        assert read_range(path, ix.entries[1:2]) == [samples[1]]

    def test_non_contiguous(self, shard):
        _, ix, path = shard
        with pytest.raises(ValueError):
            read_range(path, [ix.entries[0], ix.entries[2]])

    def test_flipped_payload_bit(self, shard):
        _, ix, path = shard
        raw = bytearray(open(path, "rb").read())
        raw[ix.entries[1].offset + 12 + 3] ^= 0x10
        open(path, "wb").write(raw)
        read_range(path, ix.entries[:1])
        with pytest.raises(CorruptRecordError) as err:
            read_range(path, ix.entries)
        assert err.value.offset == ix.entries[1].offset

    def test_flipped_length_bit(self, shard):
        _, ix, path = shard
        raw = bytearray(open(path, "rb").read())
        raw[ix.entries[2].offset] ^= 0x01
        open(path, "wb").write(raw)
        with pytest.raises(CorruptRecordError) as err:
            read_range(path, ix.entries[2:])
        assert err.value.offset == ix.entries[2].offset

    def test_short_read(self, shard):
        _, ix, path = shard
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-3])
        with pytest.raises(Exception):
            read_range(path, ix.entries)

    def test_iter_records(self, shard):
        samples, ix, path = shard
        assert [d for _, d in iter_records(path)] == [s for s, _ in samples]
        assert [o for o, _ in iter_records(path)] == [e.offset for e in ix.entries]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1 << 20), st.integers(0, 2**32 - 1)), min_size=1, max_size=6),
       st.integers(0, 2**32))
def test_roundtrip_property(tmp_path_factory, sizes, seed):
    out = tmp_path_factory.mktemp("rt")
    rnd = random.Random(seed)
    samples = [(rnd.randbytes(n), label) for n, label in sizes]
    ix = write_shard(samples, 0, out)
    assert read_range(shard_file(ix, out), ix.entries) == samples
    expected = 0
    for entry, (data, _) in zip(ix.entries, samples):
        assert entry.offset == expected
        expected += len(data) + 16


class TestConvert:
    def _make(self, root, n, size=8, classes=("cat", "dog")):
        for i in range(n):
            d = root / classes[i % len(classes)]
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{i:04d}.bin").write_bytes(bytes([i % 256]) * size)

    def test_ceil_split(self, tmp_path):
        self._make(tmp_path / "in", 10)
        indexes = convert_dataset(tmp_path / "in", tmp_path / "out", 4)
        assert [ix.total_samples for ix in indexes] == [4, 4, 2]

    def test_single_file(self, tmp_path):
        self._make(tmp_path / "in", 1)
        indexes = convert_dataset(tmp_path / "in", tmp_path / "out", 4)
        assert len(indexes) == 1 and indexes[0].total_samples == 1

    def test_no_files(self, tmp_path):
        (tmp_path / "in").mkdir()
        with pytest.raises(ValueError):
            convert_dataset(tmp_path / "in", tmp_path / "out", 4)

    def test_bijection_and_labels(self, tmp_path):
        self._make(tmp_path / "in", 9, classes=("a", "b", "c"))
        indexes = convert_dataset(tmp_path / "in", tmp_path / "out", 2, {"a": 10, "b": 20, "c": 30})
        files = sorted(p for p in (tmp_path / "in").rglob("*") if p.is_file())
        got = []
        for ix in indexes:
            got += read_range(shard_file(ix, tmp_path / "out"), ix.entries)
        # lexicographic relative paths: all of a/, then b/, then c/
        want = [(p.read_bytes(), {"a": 10, "b": 20, "c": 30}[p.parent.name]) for p in files]
        assert got == want

    def test_byte_accounting(self, tmp_path):
        src = tmp_path / "in" / "x"
        src.mkdir(parents=True)
        rng = random.Random(0)
        for i in range(1000):
            (src / f"{i:05d}").write_bytes(rng.randbytes(65536))
        indexes = convert_dataset(tmp_path / "in", tmp_path / "out", 128)
        total = sum(os.path.getsize(shard_file(ix, tmp_path / "out")) for ix in indexes)
        assert total == 1000 * 65536 + 1000 * 16
        assert sum(ix.total_samples for ix in indexes) == 1000
