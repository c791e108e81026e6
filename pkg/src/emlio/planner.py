"""Epoch planning: which contiguous shard ranges each sender worker dispatches.

For every epoch ``e`` the shard list is shuffled with a SplitMix64-driven
Fisher-Yates shuffle seeded by ``seed ^ e``, dealt round-robin to the nodes in
list order, then dealt round-robin again to the ``T`` workers of each node.
Each shard is cut into ``ceil(len(shard) / B)`` contiguous batches.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from emlio.recordfmt import ShardIndex

_MASK64 = (1 << 64) - 1


class PlanError(ValueError):
    pass


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood); 64-bit outputs."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next()
            if x < limit:
                return x % n


def shuffled(items: Sequence, seed: int) -> list:
    """Fisher-Yates shuffle of a copy of ``items``."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    ip: str
    port: int

    @property
    def address(self) -> tuple[str, int]:
        return self.ip, self.port


@dataclass(frozen=True)
class BatchRange:
    shard_id: int
    first_entry: int
    count: int
    epoch: int
    batch_index: int


@dataclass
class EpochPlan:
    epochs: int
    batch_size: int
    threads_per_node: int
    seed: int
    nodes: tuple[NodeSpec, ...] = ()
    # (epoch, node_id, worker) -> ranges in dispatch order
    assignments: dict[tuple[int, str, int], tuple[BatchRange, ...]] = field(default_factory=dict)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def ranges_for(self, epoch: int, node_id: str) -> list[BatchRange]:
        """All ranges of one node in one epoch, ordered by batch index."""
        out = [r for (e, n, _), rs in self.assignments.items() if e == epoch and n == node_id for r in rs]
        return sorted(out, key=lambda r: r.batch_index)

    def worker_ranges(self, epoch: int, node_id: str, worker: int) -> tuple[BatchRange, ...]:
        return self.assignments.get((epoch, node_id, worker), ())


def parse_nodes(spec: str) -> list[NodeSpec]:
    """Parse ``[id=]host:port,...``; ids default to ``host:port``."""
    nodes = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        node_id, _, addr = item.rpartition("=")
        host, sep, port = addr.rpartition(":")
        if not sep or not host:
            raise PlanError(f"bad node address {item!r}, expected [id=]host:port")
        nodes.append(NodeSpec(node_id or addr, host, int(port)))
    return nodes


def plan(indexes: Sequence[ShardIndex], nodes: Sequence[NodeSpec], B: int, E: int, T: int,
         seed: int) -> EpochPlan:
    if B < 1 or E < 1 or T < 1:
        raise PlanError("batch size, epochs and threads must all be >= 1")
    if not indexes:
        raise PlanError("cannot plan over zero shards")
    if not nodes:
        raise PlanError("at least one node is required")
    if len({(n.ip, n.port) for n in nodes}) != len(nodes):
        raise PlanError("node addresses must be unique")
    if len({n.node_id for n in nodes}) != len(nodes):
        raise PlanError("node ids must be unique")

    by_id = {ix.shard_id: ix for ix in indexes}
    if len(by_id) != len(indexes):
        raise PlanError("duplicate shard ids")
    shard_ids = sorted(by_id)
    result = EpochPlan(E, B, T, seed, tuple(nodes))

    for epoch in range(E):
        order = shuffled(shard_ids, (seed ^ epoch) & _MASK64)
        for n, node in enumerate(nodes):
            node_shards = order[n::len(nodes)]
            per_worker = [[] for _ in range(T)]
            batch_index = 0
            for k, shard_id in enumerate(node_shards):
                total = by_id[shard_id].total_samples
                for first in range(0, total, B):
                    per_worker[k % T].append(
                        BatchRange(shard_id, first, min(B, total - first), epoch, batch_index)
                    )
                    batch_index += 1
            for w in range(T):
                result.assignments[(epoch, node.node_id, w)] = tuple(per_worker[w])
    return result


@dataclass
class CoverageReport:
    # epoch -> list of (shard_id, entry) slots
    missing: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    duplicated: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    invalid: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.missing or self.duplicated or self.invalid)


def plan_coverage(plan: EpochPlan, indexes: Iterable[ShardIndex]) -> CoverageReport:
    """Report every (shard, entry) slot not covered exactly once, per epoch."""
    sizes = {ix.shard_id: ix.total_samples for ix in indexes}
    counts = {e: {s: np.zeros(n, dtype=np.int64) for s, n in sizes.items()} for e in range(plan.epochs)}
    report = CoverageReport()
    for (epoch, node_id, worker), ranges in plan.assignments.items():
        for r in ranges:
            if r.epoch != epoch or epoch not in counts:
                report.invalid.append(f"range {r} filed under epoch {epoch}")
                continue
            if r.shard_id not in sizes or r.count < 1 or r.first_entry + r.count > sizes[r.shard_id]:
                report.invalid.append(f"range {r} is outside its shard")
                continue
            counts[epoch][r.shard_id][r.first_entry:r.first_entry + r.count] += 1
    for epoch, per_shard in counts.items():
        for shard_id, c in sorted(per_shard.items()):
            for entry in np.flatnonzero(c == 0):
                report.missing.setdefault(epoch, []).append((shard_id, int(entry)))
            for entry in np.flatnonzero(c > 1):
                report.duplicated.setdefault(epoch, []).append((shard_id, int(entry)))
    return report


def plan_to_json(p: EpochPlan) -> dict:
    assignments = []
    for (epoch, node_id, worker), ranges in sorted(p.assignments.items()):
        assignments.append({
            "epoch": epoch,
            "node_id": node_id,
            "worker": worker,
            "ranges": [
                {"shard": r.shard_id, "first": r.first_entry, "count": r.count, "batch_index": r.batch_index}
                for r in ranges
            ],
        })
    return {
        "batch_size": p.batch_size,
        "epochs": p.epochs,
        "threads": p.threads_per_node,
        "seed": p.seed,
        "nodes": [{"node_id": n.node_id, "ip": n.ip, "port": n.port} for n in p.nodes],
        "assignments": assignments,
    }


def serialize_plan(p: EpochPlan) -> bytes:
    return json.dumps(plan_to_json(p), separators=(",", ":")).encode()


def _int(doc, key, where):
    value = doc.get(key) if isinstance(doc, dict) else None
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise PlanError(f"{where}.{key} must be a non-negative integer, got {value!r}")
    return value


def _keys(doc, keys, where):
    if not isinstance(doc, dict) or set(doc) != set(keys):
        raise PlanError(f"{where} must be an object with keys {sorted(keys)}")


def deserialize_plan(data: bytes | str) -> EpochPlan:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise PlanError(f"plan is not valid JSON: {exc}") from exc
    _keys(doc, ("batch_size", "epochs", "threads", "seed", "nodes", "assignments"), "plan")
    if not isinstance(doc["nodes"], list) or not isinstance(doc["assignments"], list):
        raise PlanError("plan.nodes and plan.assignments must be lists")
    nodes = []
    for i, n in enumerate(doc["nodes"]):
        _keys(n, ("node_id", "ip", "port"), f"nodes[{i}]")
        if not isinstance(n["node_id"], str) or not isinstance(n["ip"], str):
            raise PlanError(f"nodes[{i}] node_id and ip must be strings")
        nodes.append(NodeSpec(n["node_id"], n["ip"], _int(n, "port", f"nodes[{i}]")))
    p = EpochPlan(_int(doc, "epochs", "plan"), _int(doc, "batch_size", "plan"),
                  _int(doc, "threads", "plan"), _int(doc, "seed", "plan"), tuple(nodes))
    for i, a in enumerate(doc["assignments"]):
        where = f"assignments[{i}]"
        _keys(a, ("epoch", "node_id", "worker", "ranges"), where)
        if not isinstance(a["node_id"], str) or not isinstance(a["ranges"], list):
            raise PlanError(f"{where} has a malformed node_id or ranges")
        epoch = _int(a, "epoch", where)
        ranges = []
        for j, r in enumerate(a["ranges"]):
            _keys(r, ("shard", "first", "count", "batch_index"), f"{where}.ranges[{j}]")
            ranges.append(BatchRange(
                _int(r, "shard", where), _int(r, "first", where), _int(r, "count", where),
                epoch, _int(r, "batch_index", where),
            ))
        key = (epoch, a["node_id"], _int(a, "worker", where))
        if key in p.assignments:
            raise PlanError(f"duplicate assignment {key}")
        p.assignments[key] = tuple(ranges)
    return p


def group_by_epoch(p: EpochPlan) -> dict[int, dict[str, int]]:
    """Number of batches per (epoch, node)."""
    out: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for (epoch, node_id, _), ranges in p.assignments.items():
        out[epoch][node_id] += len(ranges)
    return {e: dict(v) for e, v in out.items()}
