"""Record shard files, their JSON indexes, and raw-directory conversion.

Shard layout, one record after another (all little-endian)::

    uint64  length
    uint32  masked crc32c(length bytes)
    byte    data[length]
    uint32  masked crc32c(data)

This is bit-compatible with TFRecord.  The companion index
``mapping_shard_<id>.json`` lists every record as ``(offset, size, label)``,
where ``offset`` points at the record's length prefix, so a contiguous run of
entries maps to one contiguous byte range of the shard.
"""

from __future__ import annotations

import json
import mmap
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from emlio.checksum import masked_crc32c

FRAME_OVERHEAD = 16
_HEADER = struct.Struct("<QI")
_FOOTER = struct.Struct("<I")
_U32_MAX = 2**32 - 1
_U64_MAX = 2**64 - 1
_INDEX_KEYS = {"shard_id", "shard_file", "records"}
_RECORD_KEYS = {"offset", "size", "label"}


class RecordFormatError(ValueError):
    pass


class IndexFormatError(RecordFormatError):
    pass


class CorruptRecordError(RecordFormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (record at offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class RecordEntry:
    offset: int
    size: int
    label: int

    @property
    def end(self) -> int:
        return self.offset + FRAME_OVERHEAD + self.size


@dataclass(frozen=True)
class ShardIndex:
    shard_id: int
    shard_path: str
    entries: tuple[RecordEntry, ...]

    @property
    def total_samples(self) -> int:
        return len(self.entries)

    @property
    def total_bytes(self) -> int:
        return self.entries[-1].end if self.entries else 0

    def to_json(self) -> dict:
        return {
            "shard_id": self.shard_id,
            "shard_file": self.shard_path,
            "records": [
                {"offset": e.offset, "size": e.size, "label": e.label} for e in self.entries
            ],
        }


def shard_filename(shard_id: int) -> str:
    return f"shard_{shard_id}.tfrecord"


def index_filename(shard_id: int) -> str:
    return f"mapping_shard_{shard_id}.json"


def frame_record(data) -> bytes:
    """Frame one payload as a single TFRecord-style record."""
    length = struct.pack("<Q", len(data))
    return b"".join(
        (length, struct.pack("<I", masked_crc32c(length)), data,
         _FOOTER.pack(masked_crc32c(data)))
    )


def write_shard(samples: Sequence[tuple[bytes, int]], shard_id: int, output_dir) -> ShardIndex:
    """Write ``samples`` as shard ``shard_id`` plus its index file; return the index."""
    if not samples:
        raise ValueError("cannot write an empty shard")
    _check_u32(shard_id, "shard_id")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = shard_filename(shard_id)
    entries = []
    offset = 0
    with open(out / name, "wb") as f:
        for data, label in samples:
            _check_u32(label, "label")
            f.write(frame_record(data))
            entries.append(RecordEntry(offset, len(data), int(label)))
            offset += len(data) + FRAME_OVERHEAD
    index = ShardIndex(shard_id, name, tuple(entries))
    with open(out / index_filename(shard_id), "w") as f:
        json.dump(index.to_json(), f)
    return index


def _check_u32(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or not 0 <= value <= _U32_MAX:
        raise ValueError(f"{what} must be an unsigned 32-bit integer, got {value!r}")


def _strict_int(value, what, upper):
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= upper:
        raise IndexFormatError(f"{what} must be a non-negative integer, got {value!r}")
    return value


def parse_index(doc) -> ShardIndex:
    """Validate a decoded index document and build a ShardIndex.

    Invariant violations are rejected, never repaired.
    """
    if not isinstance(doc, dict) or set(doc) != _INDEX_KEYS:
        raise IndexFormatError(f"index must have exactly the keys {sorted(_INDEX_KEYS)}")
    shard_id = _strict_int(doc["shard_id"], "shard_id", _U32_MAX)
    shard_file = doc["shard_file"]
    if not isinstance(shard_file, str) or not shard_file:
        raise IndexFormatError("shard_file must be a non-empty string")
    records = doc["records"]
    if not isinstance(records, list):
        raise IndexFormatError("records must be a list")
    entries = []
    prev_end = 0
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or set(rec) != _RECORD_KEYS:
            raise IndexFormatError(f"record {i} must have exactly the keys {sorted(_RECORD_KEYS)}")
        entry = RecordEntry(
            _strict_int(rec["offset"], f"records[{i}].offset", _U64_MAX),
            _strict_int(rec["size"], f"records[{i}].size", _U64_MAX),
            _strict_int(rec["label"], f"records[{i}].label", _U32_MAX),
        )
        if entry.offset < prev_end:
            raise IndexFormatError(
                f"records[{i}] at offset {entry.offset} is out of order or overlaps the previous record"
            )
        prev_end = entry.end
        entries.append(entry)
    return ShardIndex(shard_id, shard_file, tuple(entries))


def read_index(path) -> ShardIndex:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise IndexFormatError(f"{path}: malformed JSON: {exc}") from exc
    return parse_index(doc)


def load_indexes(data_dir) -> list[ShardIndex]:
    """All shard indexes in ``data_dir``, ordered by shard id."""
    data_dir = Path(data_dir)
    indexes = [read_index(p) for p in sorted(data_dir.glob("mapping_shard_*.json"))]
    indexes.sort(key=lambda ix: ix.shard_id)
    ids = [ix.shard_id for ix in indexes]
    if len(set(ids)) != len(ids):
        raise IndexFormatError(f"duplicate shard ids in {data_dir}")
    return indexes


def build_label_map(indexes: Iterable[ShardIndex]) -> np.ndarray:
    """Labels by global sample index (shards in id order, records in index order)."""
    labels = [e.label for ix in sorted(indexes, key=lambda ix: ix.shard_id) for e in ix.entries]
    return np.asarray(labels, dtype=np.uint32)


def read_range(shard_path, entries: Sequence[RecordEntry]) -> list[tuple[bytes, int]]:
    """Read a contiguous run of records with a single sequential read.

    Both CRCs of every record are verified.
    """
    return [(data.tobytes(), label) for data, label in read_range_views(shard_path, entries)]


def _check_contiguous(entries):
    for a, b in zip(entries, entries[1:]):
        if b.offset != a.end:
            raise ValueError(f"entries are not contiguous: {a.end} != {b.offset}")


def read_range_views(shard_path, entries: Sequence[RecordEntry]) -> list[tuple[memoryview, int]]:
    """Like read_range, but the payloads are views into one read buffer."""
    if not entries:
        return []
    _check_contiguous(entries)
    start, stop = entries[0].offset, entries[-1].end
    with open(shard_path, "rb") as f:
        f.seek(start)
        buf = f.read(stop - start)
    if len(buf) != stop - start:
        raise RecordFormatError(
            f"short read from {shard_path}: wanted {stop - start} bytes at {start}, got {len(buf)}"
        )
    return _deframe(memoryview(buf), entries, start)


def map_shard(shard_path) -> memoryview:
    """The whole shard file as a read-only memory map.

    The shard must not be truncated or rewritten while views of it are alive.
    """
    with open(shard_path, "rb") as f:
        size = os.fstat(f.fileno()).st_size
        if size == 0:
            return memoryview(b"")
        return memoryview(mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ))


def view_range(mapped: memoryview, entries: Sequence[RecordEntry]) -> list[tuple[memoryview, int]]:
    """Verified record payloads of a mapped shard, as views into the mapping."""
    if not entries:
        return []
    _check_contiguous(entries)
    if entries[-1].end > len(mapped):
        raise RecordFormatError(f"shard holds {len(mapped)} bytes, index needs {entries[-1].end}")
    return _deframe(mapped, entries, 0)


def _deframe(view: memoryview, entries, base: int) -> list[tuple[memoryview, int]]:
    out = []
    for entry in entries:
        pos = entry.offset - base
        length, length_crc = _HEADER.unpack_from(view, pos)
        if masked_crc32c(view[pos:pos + 8]) != length_crc:
            raise CorruptRecordError("length CRC mismatch", entry.offset)
        if length != entry.size:
            raise CorruptRecordError(f"length {length} disagrees with index size {entry.size}", entry.offset)
        data = view[pos + 12:pos + 12 + length]
        (data_crc,) = _FOOTER.unpack_from(view, pos + 12 + length)
        if masked_crc32c(data) != data_crc:
            raise CorruptRecordError("data CRC mismatch", entry.offset)
        out.append((data, entry.label))
    return out


def iter_records(shard_path) -> Iterator[tuple[int, bytes]]:
    """Scan a shard front to back without an index, yielding (offset, data)."""
    with open(shard_path, "rb") as f:
        offset = 0
        while True:
            header = f.read(12)
            if not header:
                return
            if len(header) < 12:
                raise CorruptRecordError("truncated header", offset)
            length, length_crc = _HEADER.unpack(header)
            if masked_crc32c(header[:8]) != length_crc:
                raise CorruptRecordError("length CRC mismatch", offset)
            body = f.read(length + 4)
            if len(body) < length + 4:
                raise CorruptRecordError("truncated record", offset)
            data = body[:length]
            if masked_crc32c(data) != _FOOTER.unpack_from(body, length)[0]:
                raise CorruptRecordError("data CRC mismatch", offset)
            yield offset, data
            offset += length + FRAME_OVERHEAD


LabelingRule = Callable[[str], int] | Mapping[str, int]


def convert_dataset(input_dir, output_dir, samples_per_shard: int,
                    labeling_rule: LabelingRule | None = None) -> list[ShardIndex]:
    """Pack every regular file under ``input_dir`` into shards.

    Files are taken in lexicographic order of their relative paths.  The label
    of a file comes from ``labeling_rule`` applied to its parent directory
    name; without a rule, sorted parent directory names are numbered 0, 1, ...
    """
    if samples_per_shard < 1:
        raise ValueError("samples_per_shard must be >= 1")
    root = Path(input_dir)
    files = sorted(
        (p for p in root.rglob("*") if p.is_file()),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    if not files:
        raise ValueError(f"no input files under {input_dir}")
    if labeling_rule is None:
        classes = sorted({p.parent.name for p in files})
        labeling_rule = {name: i for i, name in enumerate(classes)}
    rule = labeling_rule.__getitem__ if isinstance(labeling_rule, Mapping) else labeling_rule

    indexes = []
    for shard_id, start in enumerate(range(0, len(files), samples_per_shard)):
        chunk = files[start:start + samples_per_shard]
        samples = [(p.read_bytes(), int(rule(p.parent.name))) for p in chunk]
        indexes.append(write_shard(samples, shard_id, output_dir))
    return indexes


def shard_file(index: ShardIndex, data_dir) -> str:
    return os.path.join(data_dir, index.shard_path)
