"""Power sources behind a common ``sample(delta)`` contract.

A source declares the kinds it reports (``cpu_pkg``, ``dram``, ``gpu``) and
``sample(delta)`` returns joules consumed per kind over the coming interval.
"""

from __future__ import annotations

import glob
import logging
import math
import os
import re
import shutil
import subprocess
import time
from typing import Protocol, Sequence

log = logging.getLogger(__name__)

KIND_FIELD = {"cpu_pkg": "cpu_energy", "dram": "memory_energy", "gpu": "gpu_energy"}


class SourceUnavailable(RuntimeError):
    pass


class PowerSource(Protocol):
    kinds: tuple[str, ...]

    def sample(self, delta: float) -> dict[str, float]:
        ...


def integrate_profile(segments: Sequence[tuple[float, float]], t0: float, t1: float) -> float:
    """Energy of a piecewise-constant profile over [t0, t1).

    ``segments`` is a list of (watts, seconds); past the end the last power
    level holds.
    """
    if t1 <= t0:
        return 0.0
    energy, start = 0.0, 0.0
    for i, (watts, duration) in enumerate(segments):
        end = math.inf if i == len(segments) - 1 else start + duration
        lo, hi = max(t0, start), min(t1, end)
        if hi > lo:
            energy += watts * (hi - lo)
        start = end
        if start >= t1:
            break
    return energy


class SyntheticPowerSource:
    """Constant or piecewise-constant power, integrated analytically.

    Time is measured from the first ``sample`` call.
    """

    def __init__(self, kind: str = "cpu_pkg", watts: float | None = None,
                 profile: Sequence[tuple[float, float]] | None = None, clock=time.monotonic):
        if kind not in KIND_FIELD:
            raise ValueError(f"unknown source kind {kind!r}")
        if (watts is None) == (profile is None):
            raise ValueError("give exactly one of watts or profile")
        self.kinds = (kind,)
        self.profile = [(float(watts), math.inf)] if profile is None else [(float(w), float(d)) for w, d in profile]
        if any(w < 0 or not math.isfinite(w) for w, _ in self.profile):
            raise ValueError("power must be finite and >= 0")
        self.clock = clock
        self._t0 = None

    def sample(self, delta: float) -> dict[str, float]:
        now = self.clock()
        if self._t0 is None:
            self._t0 = now
        t = now - self._t0
        return {self.kinds[0]: integrate_profile(self.profile, t, t + delta)}


class SyntheticGpuSource:
    """Devices reporting instantaneous power in milliwatts."""

    kinds = ("gpu",)

    def __init__(self, device_mw: Sequence[float]):
        if not device_mw or any(p < 0 for p in device_mw):
            raise ValueError("need at least one device with power >= 0")
        self.device_mw = list(device_mw)

    def read_power_mw(self) -> list[float]:
        return list(self.device_mw)

    def sample(self, delta: float) -> dict[str, float]:
        return {"gpu": gpu_energy(self.read_power_mw(), delta)}


def gpu_energy(device_mw: Sequence[float], delta: float) -> float:
    """Joules over ``delta`` seconds from per-device milliwatt readings."""
    return sum(p * delta for p in device_mw) / 1000


def parse_source_spec(spec: str):
    """Build sources from ``synthetic:cpu:50,synthetic:gpu:200,rapl,nvml``.

    Synthetic power is in watts; ``synthetic:gpu:W`` models one device.
    """
    aliases = {"cpu": "cpu_pkg", "cpu_pkg": "cpu_pkg", "dram": "dram", "mem": "dram",
               "memory": "dram", "gpu": "gpu"}
    sources = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        parts = item.split(":")
        if parts[0] == "synthetic":
            if len(parts) != 3 or parts[1] not in aliases:
                raise ValueError(f"bad synthetic source {item!r}, expected synthetic:<kind>:<watts>")
            kind, watts = aliases[parts[1]], float(parts[2])
            if kind == "gpu":
                sources.append(SyntheticGpuSource([watts * 1000]))
            else:
                sources.append(SyntheticPowerSource(kind, watts=watts))
        elif parts[0] == "rapl":
            sources.append(RaplSource())
        elif parts[0] == "perf":
            sources.append(PerfStatSource())
        elif parts[0] == "nvml":
            sources.append(NvmlGpuSource())
        else:
            raise ValueError(f"unknown source {item!r}")
    if not sources:
        raise ValueError("no sources given")
    return sources


class RaplSource:
    """Package and DRAM counters from the Linux powercap interface."""

    def __init__(self, root: str = "/sys/class/powercap"):
        self.zones: dict[str, list[tuple[str, int]]] = {"cpu_pkg": [], "dram": []}
        for zone in sorted(glob.glob(os.path.join(root, "intel-rapl:*"))):
            try:
                with open(os.path.join(zone, "name")) as f:
                    name = f.read().strip()
                with open(os.path.join(zone, "max_energy_range_uj")) as f:
                    wrap = int(f.read())
                kind = "dram" if name == "dram" else "cpu_pkg" if name.startswith("package") else None
                if kind:
                    path = os.path.join(zone, "energy_uj")
                    self._read(path)
                    self.zones[kind].append((path, wrap))
            except OSError:
                continue
        self.kinds = tuple(k for k, z in self.zones.items() if z)
        if not self.kinds:
            raise SourceUnavailable("no readable RAPL zones under " + root)
        self._last = None

    @staticmethod
    def _read(path) -> int:
        with open(path) as f:
            return int(f.read())

    def _snapshot(self):
        return {k: [self._read(p) for p, _ in zones] for k, zones in self.zones.items() if zones}

    def sample(self, delta: float) -> dict[str, float]:
        # counters are cumulative: report what was consumed since the previous tick
        snap = self._snapshot()
        if self._last is None:
            self._last = snap
            time.sleep(delta * 0.5)
            return self.sample(delta)
        out = {}
        for k, values in snap.items():
            total = 0
            for (path, wrap), now, before in zip(self.zones[k], values, self._last[k]):
                total += now - before if now >= before else now + wrap - before
            out[k] = total / 1e6
        self._last = snap
        return out


class PerfStatSource:
    """``perf stat -e power/energy-pkg/,power/energy-ram/`` over each interval."""

    kinds = ("cpu_pkg", "dram")
    _EVENTS = {"power/energy-pkg/": "cpu_pkg", "power/energy-ram/": "dram"}

    def __init__(self):
        self.perf = shutil.which("perf")
        if self.perf is None:
            raise SourceUnavailable("perf not found")

    def sample(self, delta: float) -> dict[str, float]:
        cmd = [self.perf, "stat", "-a", "-x", ",", "-e", ",".join(self._EVENTS), "sleep", f"{delta:.3f}"]
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=delta + 5)
        out = {}
        for line in proc.stderr.splitlines():
            cols = line.split(",")
            for event, kind in self._EVENTS.items():
                if len(cols) > 2 and event in cols[2] and re.match(r"^[\d.]+$", cols[0]):
                    out[kind] = float(cols[0])
        if set(out) != set(self.kinds):
            raise OSError(f"perf stat gave no energy readings: {proc.stderr.strip()[:200]}")
        return out


class NvmlGpuSource:
    """Per-device power draw via NVML (needs the pynvml module and a driver)."""

    kinds = ("gpu",)

    def __init__(self):
        try:
            import pynvml
        except ImportError as exc:
            raise SourceUnavailable("pynvml is not installed") from exc
        try:
            pynvml.nvmlInit()
            count = pynvml.nvmlDeviceGetCount()
        except Exception as exc:
            raise SourceUnavailable(f"NVML unavailable: {exc}") from exc
        if count == 0:
            raise SourceUnavailable("no GPUs")
        self._nvml = pynvml
        self._handles = [pynvml.nvmlDeviceGetHandleByIndex(i) for i in range(count)]

    def sample(self, delta: float) -> dict[str, float]:
        readings = [self._nvml.nvmlDeviceGetPowerUsage(h) for h in self._handles]
        return {"gpu": gpu_energy(readings, delta)}


def os_adapters() -> list:
    """Real sources this machine supports; unsupported ones are skipped."""
    found = []
    for cls in (RaplSource, NvmlGpuSource):
        try:
            found.append(cls())
        except SourceUnavailable as exc:
            log.info("%s unavailable: %s", cls.__name__, exc)
    if not any("cpu_pkg" in s.kinds for s in found):
        try:
            found.append(PerfStatSource())
        except SourceUnavailable as exc:
            log.info("PerfStatSource unavailable: %s", exc)
    return found
