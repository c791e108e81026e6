"""
Two compute nodes, local and remote storage
===========================================

Each compute node gets half of its batches from a local sender and half
from a remote one behind an injected delay.  The plan still reads every
sample exactly once across both nodes.
"""

import tempfile
from pathlib import Path

from emlio.bench import Workload, gen_synthetic, run_sharded

work = Path(tempfile.mkdtemp(prefix="emlio-demo-"))
workload = Workload(num_samples=4096, sample_bytes=16 * 1024, batch_size=32, epochs=2, compute_ms=4.0)
gen_synthetic(workload.num_samples, workload.sample_bytes, work / "data", samples_per_shard=128)

for rtt in (0, 30):
    res = run_sharded(workload, rtt, work / "data", num_nodes=2)
    times = {n: [round(s.wall_time_s, 3) for s in r.epochs] for n, r in res.nodes.items()}
    print(f"rtt {rtt:2d} ms: epoch times {times}, read once: {res.read_once}, "
          f"coverage ok: {res.coverage_ok}")
