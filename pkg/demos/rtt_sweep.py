"""
Pipelined streaming against per-batch requests
==============================================

The same synthetic dataset is consumed two ways at several injected round
trip times.  The per-batch request loader pays one round trip per batch,
while the pipelined loader keeps a window of batches in flight and hides
the latency.  Stage windows from the event log are joined with the energy
log to split every epoch's energy into I/O, decode and compute.
"""

import sys
import tempfile

from emlio.bench import Workload, compare

workload = Workload(num_samples=640, sample_bytes=64 * 1024, batch_size=32, compute_ms=5.0)
work = tempfile.mkdtemp(prefix="emlio-demo-")
plots = sys.argv[1] if len(sys.argv) > 1 else None

report = compare(workload, work_dir=work, plots_dir=plots, repeats=3)

print(f"{'mode':10s} {'rtt':>5s} {'epoch s':>8s} {'io share':>9s}")
for mode, rows in report["summary"].items():
    for rtt, row in rows.items():
        print(f"{mode:10s} {rtt:>5s} {row['epoch_time_s']:8.3f} {row['io_share_energy']:9.3f}")

for name, check in report["checks"].items():
    print("PASS" if check["pass"] else "FAIL", name)
if plots:
    print("charts written to", plots)
