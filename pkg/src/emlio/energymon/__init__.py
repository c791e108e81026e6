from emlio.energymon.monitor import (
    MISSING,
    GapWarning,
    MonitorConfig,
    MonitorHandle,
    TickRendezvous,
    interpolate_gaps,
    run_monitor,
)
from emlio.energymon.sources import (
    NvmlGpuSource,
    PerfStatSource,
    PowerSource,
    RaplSource,
    SourceUnavailable,
    SyntheticGpuSource,
    SyntheticPowerSource,
    gpu_energy,
    integrate_profile,
    os_adapters,
    parse_source_spec,
)
from emlio.energymon.store import (
    FIELDS,
    EnergyPoint,
    EnergyStore,
    EnergyTotals,
    StoreError,
    format_point,
    parse_line,
    query_energy,
)
