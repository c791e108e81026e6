"""
Sampling energy on a fixed grid
===============================

One sampler thread per power source reads energy on a shared tick grid.
Late or failed samples are filled in by interpolation and flagged, and the
points go to a line-protocol log that can be queried by time window.
"""

import tempfile
import time
from pathlib import Path

from emlio.energymon import (
    EnergyStore,
    MonitorConfig,
    SyntheticGpuSource,
    SyntheticPowerSource,
    run_monitor,
)

log = Path(tempfile.mkdtemp(prefix="emlio-demo-")) / "energy.log"

# A CPU package that steps from 50 W to 150 W, DRAM at 5 W, two 100 W GPUs.
sources = [
    SyntheticPowerSource("cpu_pkg", profile=[(50, 1.0), (150, 1.0)]),
    SyntheticPowerSource("dram", watts=5),
    SyntheticGpuSource([100_000, 100_000]),
]
config = MonitorConfig(log, node_id="demo", interval_s=0.05)
with run_monitor(config, sources) as handle:
    time.sleep(2.0)
print(f"{handle.points_written} points, warnings: {handle.warnings or 'none'}")

print(log.read_text().splitlines()[0])

store = EnergyStore(log)
ticks = store.ticks("demo")
mid = ticks[len(ticks) // 2]
first, second = store.query("demo", ticks[0], mid), store.query("demo", mid, ticks[-1] + 1)
whole = store.query("demo", ticks[0], ticks[-1] + 1)
print("first half:", first.to_json())
print("second half:", second.to_json())
# Half-open windows never double count, so the halves add up exactly.
print("halves add up:", first + second == whole)
