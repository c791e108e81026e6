"""Append-only energy time series in a line protocol, with range queries.

One point per line::

    energy,node_id=<id> cpu_energy=<f>,memory_energy=<f>,gpu_energy=<f>,interp_mask=<u8> <t_k ns>

A field the node does not have (no GPU, say) is left out of the line.
Values are written with microjoule resolution and summed as integer
microjoules, so adjacent half-open windows add up exactly.
"""

from __future__ import annotations

import bisect
import os
import re
import threading
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

FIELDS = ("cpu_energy", "memory_energy", "gpu_energy")
MASK_BITS = {"cpu_energy": 1, "memory_energy": 2, "gpu_energy": 4}
_NODE_RE = re.compile(r"^[^\s,=]+$")
_LINE_RE = re.compile(r"^energy,node_id=(?P<node>[^\s,=]+) (?P<fields>\S+) (?P<t>\d+)$")


class StoreError(ValueError):
    pass


@dataclass
class EnergyPoint:
    t_k: int
    node_id: str
    values: dict[str, float]
    interpolated: dict[str, bool] = field(default_factory=dict)

    @property
    def interp_mask(self) -> int:
        return sum(MASK_BITS[f] for f, flag in self.interpolated.items() if flag)

    def __getattr__(self, name):
        if name in FIELDS:
            return self.__dict__["values"].get(name)
        raise AttributeError(name)


def to_uj(joules: float) -> int:
    return int((Decimal(repr(float(joules))) * 1_000_000).to_integral_value())


def format_point(point: EnergyPoint) -> str:
    if not _NODE_RE.match(point.node_id):
        raise StoreError(f"node id {point.node_id!r} may not contain spaces, commas or '='")
    parts = [f"{f}={to_uj(point.values[f]) / 1e6:.6f}" for f in FIELDS if f in point.values]
    parts.append(f"interp_mask={point.interp_mask}")
    return f"energy,node_id={point.node_id} {','.join(parts)} {point.t_k}"


def parse_line(line: str) -> tuple[str, int, dict[str, int], int]:
    """Returns (node_id, t_k, {field: microjoules}, interp_mask)."""
    m = _LINE_RE.match(line.strip())
    if not m:
        raise StoreError(f"malformed line: {line!r}")
    values, mask = {}, None
    for item in m["fields"].split(","):
        key, sep, raw = item.partition("=")
        if not sep:
            raise StoreError(f"malformed field {item!r}")
        if key == "interp_mask":
            mask = int(raw)
        elif key in FIELDS:
            values[key] = int((Decimal(raw) * 1_000_000).to_integral_value())
        else:
            raise StoreError(f"unknown field {key!r}")
    if mask is None:
        raise StoreError("missing interp_mask")
    return m["node"], int(m["t"]), values, mask


@dataclass(frozen=True)
class EnergyTotals:
    """Per-field energy over a window, as exact integer microjoules."""

    cpu_uj: int = 0
    memory_uj: int = 0
    gpu_uj: int | None = None
    ticks: int = 0

    @property
    def cpu_energy(self) -> float:
        return self.cpu_uj / 1e6

    @property
    def memory_energy(self) -> float:
        return self.memory_uj / 1e6

    @property
    def gpu_energy(self) -> float | None:
        return None if self.gpu_uj is None else self.gpu_uj / 1e6

    @property
    def total_uj(self) -> int:
        return self.cpu_uj + self.memory_uj + (self.gpu_uj or 0)

    @property
    def total(self) -> float:
        return self.total_uj / 1e6

    def __add__(self, other: "EnergyTotals") -> "EnergyTotals":
        gpu = None if self.gpu_uj is None and other.gpu_uj is None else (self.gpu_uj or 0) + (other.gpu_uj or 0)
        return EnergyTotals(self.cpu_uj + other.cpu_uj, self.memory_uj + other.memory_uj, gpu,
                            self.ticks + other.ticks)

    def to_json(self) -> dict:
        return {"cpu_j": self.cpu_energy, "memory_j": self.memory_energy, "gpu_j": self.gpu_energy,
                "total_j": self.total, "ticks": self.ticks}


class _Series:
    def __init__(self):
        self.t: list[int] = []
        self.cum = {f: [0] for f in FIELDS}
        self.has = {f: False for f in FIELDS}


class EnergyStore:
    """File-backed store; queries use an in-memory prefix-sum index."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._series: dict[str, _Series] = {}
        self._loaded_size = -1

    def write_points(self, points, node_id: str | None = None) -> None:
        lines = []
        for p in points:
            if node_id is not None:
                p = EnergyPoint(p.t_k, node_id, p.values, p.interpolated)
            lines.append(format_point(p) + "\n")
        with self._lock, open(self.path, "a") as f:
            f.writelines(lines)
            f.flush()

    def _refresh(self):
        size = os.path.getsize(self.path) if self.path.exists() else 0
        if size == self._loaded_size:
            return
        series: dict[str, _Series] = {}
        rows = []
        if size:
            with open(self.path) as f:
                for line in f:
                    if line.strip():
                        rows.append(parse_line(line))
        rows.sort(key=lambda r: (r[0], r[1]))
        for node, t, values, _ in rows:
            s = series.setdefault(node, _Series())
            if s.t and t <= s.t[-1]:
                raise StoreError(f"duplicate tick {t} for node {node}")
            s.t.append(t)
            for f in FIELDS:
                if f in values:
                    s.has[f] = True
                s.cum[f].append(s.cum[f][-1] + values.get(f, 0))
        self._series = series
        self._loaded_size = size

    def nodes(self) -> list[str]:
        with self._lock:
            self._refresh()
            return sorted(self._series)

    def ticks(self, node_id: str) -> list[int]:
        with self._lock:
            self._refresh()
            s = self._series.get(node_id)
            return list(s.t) if s else []

    def points(self, node_id: str) -> list[tuple[int, dict[str, int], int]]:
        rows = []
        with open(self.path) as f:
            for line in f:
                if line.strip():
                    node, t, values, mask = parse_line(line)
                    if node == node_id:
                        rows.append((t, values, mask))
        return sorted(rows, key=lambda r: r[0])

    def query(self, node_id: str, t_start: int, t_end: int) -> EnergyTotals:
        """Sum each field over ticks with ``t_start <= t_k < t_end``."""
        if t_start > t_end:
            raise ValueError("t_start must not exceed t_end")
        with self._lock:
            self._refresh()
            s = self._series.get(node_id)
            if s is None:
                return EnergyTotals()
            i = bisect.bisect_left(s.t, t_start)
            j = bisect.bisect_left(s.t, t_end)
            sums = {f: s.cum[f][j] - s.cum[f][i] for f in FIELDS}
            return EnergyTotals(sums["cpu_energy"], sums["memory_energy"],
                                sums["gpu_energy"] if s.has["gpu_energy"] else None, j - i)


def query_energy(store, node_id: str, t_start: int, t_end: int) -> EnergyTotals:
    if not isinstance(store, EnergyStore):
        store = EnergyStore(store)
    return store.query(node_id, t_start, t_end)
