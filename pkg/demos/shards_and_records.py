"""
Packing samples into record shards
==================================

Raw samples are packed into append-only shard files.  Each record is framed
with its length and two masked CRC-32C checksums, and every shard gets a JSON
index of offsets, sizes and labels.
"""

import tempfile
from pathlib import Path

import numpy as np

from emlio.recordfmt import (
    RecordFormatError,
    convert_dataset,
    iter_records,
    load_indexes,
    read_range,
    shard_file,
)

work = Path(tempfile.mkdtemp(prefix="emlio-demo-"))

# A tiny class-per-directory dataset: the directory name is the label.
rng = np.random.default_rng(0)
for cls in ("cats", "dogs", "birds"):
    (work / "raw" / cls).mkdir(parents=True)
    for i in range(7):
        (work / "raw" / cls / f"{i}.bin").write_bytes(rng.bytes(int(rng.integers(10, 500))))

indexes = convert_dataset(work / "raw", work / "shards", samples_per_shard=8)
print(f"{len(indexes)} shards:", [ix.total_samples for ix in indexes])

# The index lets a reader fetch any contiguous run of records in one read.
ix = indexes[0]
batch = read_range(shard_file(ix, work / "shards"), ix.entries[2:6])
print("records 2..5 of shard 0:", [(len(data), label) for data, label in batch])

# Shards can also be scanned front to back without the index.
print("scanned", sum(1 for _ in iter_records(shard_file(ix, work / "shards"))), "records")

# Flip one bit in a payload and the checksum catches it.
path = Path(shard_file(ix, work / "shards"))
raw = bytearray(path.read_bytes())
raw[ix.entries[3].offset + 12] ^= 0x10
path.write_bytes(raw)
try:
    read_range(path, ix.entries[2:6])
except RecordFormatError as exc:
    print("corruption detected:", exc)

print("indexes on disk:", len(load_indexes(work / "shards")))
