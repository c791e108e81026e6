"""End-to-end experiments: pipelined streaming against a per-batch request loader.

Everything runs in one process on loopback.  Remote storage is emulated by
the transport delay shim, and power comes from synthetic sources unless real
adapters are requested.  A run produces an event log; ``make_report`` joins
it with the energy log into per-epoch stage windows:

* ``io``: the consumer is waiting for data (read and delivery)
* ``decode``: the batch payload is being unpacked on the consumer
* ``compute``: the simulated training step

The windows tile ``[epoch_start, epoch_end)`` without gaps or overlap, so the
stage energies add up exactly to the whole-epoch energy.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import logging
import statistics
import tempfile
import threading
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from emlio.energymon import EnergyStore, EnergyTotals, MonitorConfig, parse_source_spec, run_monitor
from emlio.events import EventLogger, log_event, now_ns, read_events
from emlio.planner import EpochPlan, NodeSpec, plan, plan_coverage
from emlio.receiver import DecodedBatch, EpochSummary, Receiver, ReceiverConfig, consume, simulated_compute
from emlio.recordfmt import ShardIndex, load_indexes, write_shard
from emlio.sender import (
    BatchRequestServer,
    SenderConfig,
    decode_batch,
    encode_request,
    run_sender,
)
from emlio.transport import BATCH, REQUEST, ChannelConfig, Frame, RequestChannel, with_injected_delay

log = logging.getLogger(__name__)

STAGES = ("io", "decode", "compute")
DEFAULT_SOURCES = "synthetic:cpu:50,synthetic:dram:5,synthetic:gpu:100"


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(mmap_threshold: int = 64 << 20, trim_threshold: int = 1 << 30) -> bool:
    """Keep multi-MB batch buffers on the heap instead of fresh mmaps.

    glibc maps each large allocation separately and unmaps it on free, so
    every 2 MB batch costs page faults on both ends.  Raising the thresholds
    lets freed buffers be reused.  Process-wide; returns False off glibc.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, mmap_threshold) == 1
        return libc.mallopt(_M_TRIM_THRESHOLD, trim_threshold) == 1 and ok
    except (OSError, AttributeError):
        return False


class BenchError(RuntimeError):
    pass


class ReportError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems[:20]) + (" ..." if len(problems) > 20 else ""))
        self.problems = problems


@dataclass(frozen=True)
class Workload:
    num_samples: int = 1000
    sample_bytes: int = 64 * 1024
    batch_size: int = 32
    epochs: int = 1
    rtt_list: tuple[float, ...] = (0.0, 10.0, 30.0)
    compute_ms: float = 2.0
    threads: int = 1
    hwm: int = 16
    prefetch: int = 2
    samples_per_shard: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("num_samples", "sample_bytes", "batch_size", "epochs", "threads", "hwm",
                     "prefetch", "samples_per_shard"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.compute_ms < 0:
            raise ValueError("compute_ms must be >= 0")
        if not self.rtt_list or any(r < 0 for r in self.rtt_list):
            raise ValueError("rtt_list must be non-empty and non-negative")


def gen_synthetic(num_samples: int, sample_bytes: int, out_dir, seed: int = 0,
                  samples_per_shard: int = 128, num_classes: int = 10) -> list[ShardIndex]:
    """Write a deterministic random dataset as shards plus index files."""
    if num_samples < 1 or sample_bytes < 1 or samples_per_shard < 1:
        raise ValueError("num_samples, sample_bytes and samples_per_shard must be positive")
    rng = np.random.default_rng(seed)
    indexes = []
    for shard_id, start in enumerate(range(0, num_samples, samples_per_shard)):
        n = min(samples_per_shard, num_samples - start)
        blob = rng.bytes(n * sample_bytes)
        labels = rng.integers(0, num_classes, n)
        samples = [(blob[i * sample_bytes:(i + 1) * sample_bytes], int(labels[i])) for i in range(n)]
        indexes.append(write_shard(samples, shard_id, out_dir))
    return indexes


@dataclass
class RunResult:
    mode: str
    rtt_ms: float
    plan: EpochPlan
    epochs: list[EpochSummary]
    events: EventLogger
    extra: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return bool(self.epochs) and all(s.complete and s.matches_plan is not False for s in self.epochs)

    @property
    def epoch_times(self) -> list[float]:
        return [s.wall_time_s for s in self.epochs]


def _plan(workload: Workload, data_dir, node_ids, threads) -> tuple[EpochPlan, list[ShardIndex]]:
    indexes = load_indexes(data_dir)
    # placeholder ports: senders are always given the receiver's bound address
    nodes = [NodeSpec(n, "127.0.0.1", i + 1) for i, n in enumerate(node_ids)]
    return plan(indexes, nodes, workload.batch_size, workload.epochs, threads, workload.seed), indexes


def _receiver_config(workload: Workload, node_id: str, senders: int) -> ReceiverConfig:
    return ReceiverConfig(prefetch_depth=workload.prefetch, expected_senders=senders,
                          compute_ms=workload.compute_ms, epochs=workload.epochs, node_id=node_id,
                          channel=ChannelConfig(hwm=workload.hwm))


def run_pipelined(workload: Workload, rtt_ms: float, data_dir, events: EventLogger | None = None,
                  node_id: str = "compute") -> RunResult:
    """Plan, serve and consume the dataset with ``rtt_ms`` of injected round trip."""
    events = events if events is not None else EventLogger()
    p, _ = _plan(workload, data_dir, [node_id], workload.threads)
    channel = with_injected_delay(ChannelConfig(hwm=workload.hwm), rtt_ms / 2)
    result = {}
    with Receiver(_receiver_config(workload, node_id, 1), events) as rx:
        config = SenderConfig(p, node_id, data_dir, channel=channel, events=events, target=rx.address)
        t = threading.Thread(target=lambda: result.update(sent=run_sender(config)), name="bench-sender")
        t.start()
        summaries = consume(rx, plan=p)
    t.join()
    return RunResult("pipelined", rtt_ms, p, summaries, events, {"sender": result.get("sent")})


def run_baseline(workload: Workload, rtt_ms: float, data_dir, events: EventLogger | None = None,
                 node_id: str = "compute") -> RunResult:
    """One synchronous REQUEST/BATCH round trip per batch, no overlap."""
    events = events if events is not None else EventLogger()
    p, _ = _plan(workload, data_dir, [node_id], workload.threads)
    channel = with_injected_delay(ChannelConfig(), rtt_ms / 2)
    step = simulated_compute(workload.compute_ms)
    summaries = []
    with BatchRequestServer(data_dir, events=events) as server, \
            RequestChannel(server, channel, node_id=node_id) as chan:
        for epoch in range(workload.epochs):
            s = EpochSummary(epoch, complete=True)
            for r in p.ranges_for(epoch, node_id):
                wait_start = now_ns()
                if not s.start_ns:
                    s.start_ns = wait_start
                    log_event(events, "epoch_start", (epoch, node_id, None, None), t=wait_start)
                reply = chan.request(Frame(REQUEST, encode_request(r)))
                ready = now_ns()
                if reply.frame_type != BATCH:
                    raise BenchError(f"expected a BATCH reply, got frame type {reply.frame_type}")
                got = decode_batch(reply.payload)
                if got[:3] != (r.epoch, r.shard_id, r.batch_index):
                    raise BenchError(f"reply {got[:3]} does not match request {r}")
                compute_start = now_ns()
                step(DecodedBatch(*got, recv_time=ready, nbytes=len(reply.payload)))
                log_event(events, "batch_recv", (epoch, node_id, r.shard_id, r.batch_index),
                          wait_start=wait_start, ready=ready, compute_start=compute_start,
                          arrived=ready, stream=chan.stream_id, bytes=len(reply.payload))
                s.batches += 1
                s.samples += len(got[3])
                s.bytes += len(reply.payload)
                s.keys.append((r.shard_id, r.batch_index))
            s.end_ns = now_ns()
            if not s.start_ns:
                s.start_ns = s.end_ns
                log_event(events, "epoch_start", (epoch, node_id, None, None), t=s.end_ns)
            log_event(events, "epoch_end", (epoch, node_id, None, None), t=s.end_ns, complete=True)
            s.wall_time_s = (s.end_ns - s.start_ns) / 1e9
            s.matches_plan = sorted(s.keys) == sorted((r.shard_id, r.batch_index)
                                                      for r in p.ranges_for(epoch, node_id))
            summaries.append(s)
    return RunResult("baseline", rtt_ms, p, summaries, events)


@dataclass
class ShardedResult:
    rtt_ms: float
    plan: EpochPlan
    nodes: dict[str, RunResult]
    coverage_ok: bool
    read_once: bool

    @property
    def complete(self) -> bool:
        return self.coverage_ok and self.read_once and all(r.complete for r in self.nodes.values())


def run_sharded(workload: Workload, rtt_ms: float, data_dir, num_nodes: int = 2,
                events: EventLogger | None = None) -> ShardedResult:
    """Several compute nodes, each fed by a local sender and a delayed remote one.

    A node's workers are split between the two senders: even worker ids go
    to the local sender (no delay), odd ones to the remote sender.
    """
    if num_nodes < 2:
        raise ValueError("run_sharded needs at least two nodes")
    events = events if events is not None else EventLogger()
    threads = max(2, workload.threads)
    node_ids = [f"node{i}" for i in range(num_nodes)]
    p, indexes = _plan(workload, data_dir, node_ids, threads)
    local = ChannelConfig(hwm=workload.hwm)
    remote = with_injected_delay(local, rtt_ms / 2)
    receivers = {n: Receiver(_receiver_config(workload, n, 2), events) for n in node_ids}
    summaries: dict[str, list[EpochSummary]] = {}
    sent = []
    try:
        workers = []
        for n, rx in receivers.items():
            for channel, ids in ((local, range(0, threads, 2)), (remote, range(1, threads, 2))):
                config = SenderConfig(p, n, data_dir, channel=channel, worker_ids=list(ids),
                                      events=events, target=rx.address)
                workers.append(threading.Thread(target=lambda c=config: sent.append(run_sender(c))))
            workers.append(threading.Thread(
                target=lambda n=n, rx=rx: summaries.__setitem__(n, consume(rx, plan=p))))
        for t in workers:
            t.start()
        for t in workers:
            t.join()
    finally:
        for rx in receivers.values():
            rx.close()
    reads: Counter = Counter()
    for s in sent:
        reads.update(s.reads)
    planned = {(r.epoch, r.shard_id, r.first_entry) for rs in p.assignments.values() for r in rs}
    read_once = set(reads) == planned and all(v == 1 for v in reads.values())
    coverage_ok = plan_coverage(p, indexes).empty
    nodes = {n: RunResult("sharded", rtt_ms, p, summaries.get(n, []), events) for n in node_ids}
    return ShardedResult(rtt_ms, p, nodes, coverage_ok, read_once)


def _stage_windows(events: list[dict], plan: EpochPlan | None):
    """Per (node, epoch): the epoch bounds and the stage windows that tile them."""
    starts, ends = defaultdict(list), defaultdict(list)
    recvs = defaultdict(list)
    for ev in events:
        key = (ev["node"], ev["epoch"])
        if ev["kind"] == "epoch_start":
            starts[key].append(ev["t_ns"])
        elif ev["kind"] == "epoch_end":
            ends[key].append(ev["t_ns"])
        elif ev["kind"] == "batch_recv":
            recvs[key].append(ev)
    problems = []
    out = {}
    for key in sorted(set(starts) | set(ends) | set(recvs), key=str):
        node, epoch = key
        if len(starts[key]) != 1 or len(ends[key]) != 1:
            problems.append(f"epoch {epoch} node {node}: {len(starts[key])} epoch_start and "
                            f"{len(ends[key])} epoch_end events")
            continue
        t0, t1 = starts[key][0], ends[key][0]
        windows = {s: [] for s in STAGES}
        prev = t0
        seen = Counter()
        for ev in sorted(recvs[key], key=lambda e: e["t_ns"]):
            bkey = (epoch, node, ev["shard"], ev["batch"])
            seen[(ev["shard"], ev["batch"])] += 1
            try:
                marks = [ev["wait_start"], ev["ready"], ev["compute_start"], ev["t_ns"]]
            except KeyError as exc:
                problems.append(f"{bkey}: batch_recv lacks {exc}")
                continue
            if not prev <= marks[0] <= marks[1] <= marks[2] <= marks[3]:
                problems.append(f"{bkey}: stage markers overlap or run backwards")
                continue
            windows["io"].append((prev, marks[1]))
            windows["decode"].append((marks[1], marks[2]))
            windows["compute"].append((marks[2], marks[3]))
            prev = marks[3]
        if prev > t1:
            problems.append(f"epoch {epoch} node {node}: batches consumed after epoch_end")
            continue
        windows["io"].append((prev, t1))
        dups = sorted(k for k, c in seen.items() if c > 1)
        if dups:
            problems.append(f"epoch {epoch} node {node}: duplicate batches {dups}")
        if plan is not None:
            want = {(r.shard_id, r.batch_index) for r in plan.ranges_for(epoch, node)}
            missing, extra = sorted(want - set(seen)), sorted(set(seen) - want)
            if missing or extra:
                problems.append(f"epoch {epoch} node {node}: missing batches {missing}, unexpected {extra}")
        out[key] = (t0, t1, windows, sum(seen.values()),
                    sum(ev.get("bytes", 0) for ev in recvs[key]))
    if problems:
        raise ReportError(problems)
    return out


def make_report(energy_log, events_log, plan: EpochPlan | None = None, energy_node: str | None = None,
                mode: str | None = None, rtt_ms: float | None = None) -> dict:
    """Join stage windows from an event log with an energy log.

    ``energy_node`` selects the energy series; it may be omitted when the log
    holds exactly one node.  Raises ReportError listing every offending epoch
    or batch when stage events are missing or overlap.
    """
    store = energy_log if isinstance(energy_log, EnergyStore) else EnergyStore(energy_log)
    events = events_log.events if isinstance(events_log, EventLogger) else read_events(events_log)
    if energy_node is None:
        nodes = store.nodes()
        if len(nodes) != 1:
            raise ReportError([f"energy log holds nodes {nodes}; choose one with energy_node"])
        energy_node = nodes[0]
    epochs = []
    for (node, epoch), (t0, t1, windows, batches, nbytes) in _stage_windows(events, plan).items():
        whole = store.query(energy_node, t0, t1)
        stages, total = {}, EnergyTotals()
        for name, spans in windows.items():
            e = EnergyTotals()
            for a, b in spans:
                e = e + store.query(energy_node, a, b)
            total = total + e
            stages[name] = {"time_s": sum(b - a for a, b in spans) / 1e9, **e.to_json()}
        wall = (t1 - t0) / 1e9
        epochs.append({
            "node": node, "epoch": epoch, "wall_time_s": wall, "batches": batches, "bytes": nbytes,
            "stages": stages, "energy": whole.to_json(),
            "io_share_energy": stages["io"]["total_j"] / whole.total if whole.total_uj else None,
            "io_share_time": stages["io"]["time_s"] / wall if wall else None,
            "conserved": (total.cpu_uj, total.memory_uj, total.gpu_uj or 0, total.ticks)
                         == (whole.cpu_uj, whole.memory_uj, whole.gpu_uj or 0, whole.ticks),
        })
    return {"mode": mode, "rtt_ms": rtt_ms, "energy_node": energy_node, "epochs": epochs}


def _mean(rows, key):
    vals = [r[key] for r in rows if r[key] is not None]
    return sum(vals) / len(vals) if vals else None


def summarize(reports: list[dict]) -> dict:
    """Median over repeats of the per-run epoch means, per (mode, rtt)."""
    groups = defaultdict(list)
    for rep in reports:
        groups[(rep["mode"], rep["rtt_ms"])].append(rep)
    out = {}
    for (mode, rtt), reps in groups.items():
        times = [_mean(r["epochs"], "wall_time_s") for r in reps]
        shares = [_mean(r["epochs"], "io_share_energy") for r in reps]
        shares = [s for s in shares if s is not None]
        out.setdefault(mode, {})[rtt] = {
            "epoch_time_s": statistics.median(times),
            "io_share_energy": statistics.median(shares) if shares else None,
            "io_share_time": statistics.median(_mean(r["epochs"], "io_share_time") for r in reps),
            "batches": reps[0]["epochs"][0]["batches"] if reps[0]["epochs"] else 0,
            "repeats": len(reps),
        }
    return out


def _check(passed: bool, value, threshold) -> dict:
    return {"pass": bool(passed), "value": value, "threshold": threshold}


def check_invariants(summary: dict, reports: list[dict], complete: bool) -> dict:
    checks = {"all_runs_complete": _check(complete, complete, True),
              "stage_energy_conserved": _check(all(e["conserved"] for r in reports for e in r["epochs"]),
                                               None, "exact")}
    pipe, base = summary.get("pipelined", {}), summary.get("baseline", {})
    rtts = sorted(set(pipe) & set(base))
    if len(rtts) >= 2:
        times = [pipe[r]["epoch_time_s"] for r in rtts]
        checks["pipelined_rtt_invariance"] = _check(max(times) / min(times) <= 1.10,
                                                    max(times) / min(times), 1.10)
        bt = [base[r]["epoch_time_s"] for r in rtts]
        checks["baseline_monotone"] = _check(all(a <= b for a, b in zip(bt, bt[1:])), bt, "non-decreasing")
        n = base[rtts[-1]]["batches"]
        need = 0.8 * n * (rtts[-1] - rtts[0]) / 1000
        checks["baseline_degradation"] = _check(bt[-1] - bt[0] >= need, bt[-1] - bt[0], need)
        bs = [base[r]["io_share_energy"] for r in rtts]
        ps = [pipe[r]["io_share_energy"] for r in rtts]
        if None not in bs and None not in ps:
            checks["baseline_io_share_increasing"] = _check(all(a < b for a, b in zip(bs, bs[1:])), bs,
                                                            "strictly increasing")
            spread = max(ps) - min(ps)
            checks["pipelined_io_share_flat"] = _check(spread <= 0.10, spread, 0.10)
    if 30.0 in pipe and 30.0 in base:
        speedup = base[30.0]["epoch_time_s"] / pipe[30.0]["epoch_time_s"]
        checks["speedup_at_30ms"] = _check(speedup >= 5.0, speedup, 5.0)
    return checks


def compare(workload: Workload, out=None, work_dir=None, plots_dir=None, sources: str = DEFAULT_SOURCES,
            energy_interval_ms: float = 5.0, repeats: int = 1, node_id: str = "host",
            tune_malloc: bool = True) -> dict:
    """Run both loaders at every RTT under an energy monitor and check the trends.

    Repeats are interleaved across RTTs and modes so slow drift in the host
    hits every configuration alike; the summary takes medians.  Returns the
    report; ``report["ok"]`` is False when any invariant check fails.
    """
    if tune_malloc:
        tune_allocator()
    work = Path(work_dir) if work_dir else Path(tempfile.mkdtemp(prefix="emlio-bench-"))
    work.mkdir(parents=True, exist_ok=True)
    data = work / "data"
    if not data.exists():
        gen_synthetic(workload.num_samples, workload.sample_bytes, data, workload.seed,
                      workload.samples_per_shard)
    energy_log = work / "energy.log"
    energy_log.unlink(missing_ok=True)
    monitor = run_monitor(MonitorConfig(energy_log, node_id, energy_interval_ms / 1000),
                          parse_source_spec(sources))
    runs = []
    try:
        for rep in range(repeats):
            for rtt in workload.rtt_list:
                for mode, fn in (("pipelined", run_pipelined), ("baseline", run_baseline)):
                    path = work / f"events_{mode}_rtt{rtt:g}_{rep}.jsonl"
                    path.unlink(missing_ok=True)
                    with EventLogger(path) as events:
                        result = fn(workload, rtt, data, events)
                    log.info("%s rtt=%g ms: epoch times %s", mode, rtt, result.epoch_times)
                    runs.append((result, path))
    finally:
        monitor.stop()
    store = EnergyStore(energy_log)
    reports = [make_report(store, path, r.plan, node_id, r.mode, float(r.rtt_ms)) for r, path in runs]
    summary = summarize(reports)
    checks = check_invariants(summary, reports, all(r.complete for r, _ in runs))
    report = {
        "workload": asdict(workload),
        "energy": {"sources": sources, "interval_ms": energy_interval_ms, "node": node_id,
                   "log": str(energy_log), "warnings": monitor.warnings},
        "runs": reports,
        "summary": {m: {f"{k:g}": v for k, v in s.items()} for m, s in summary.items()},
        "checks": checks,
        "ok": all(c["pass"] for c in checks.values()),
    }
    if out is not None:
        import json
        Path(out).write_text(json.dumps(report, indent=2))
    if plots_dir is not None:
        plot_report(report, plots_dir)
    return report


def plot_report(report: dict, out_dir) -> list[Path]:
    """Grouped per-stage energy bars with epoch time on a second axis, one chart per mode."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise BenchError("plots need matplotlib (pip install 'artifact[plots]')") from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_mode = defaultdict(lambda: defaultdict(list))
    for run in report["runs"]:
        by_mode[run["mode"]][run["rtt_ms"]].extend(run["epochs"])
    files = []
    for mode, per_rtt in by_mode.items():
        rtts = sorted(per_rtt)
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.8 / len(STAGES)
        x = np.arange(len(rtts))
        for i, stage in enumerate(STAGES):
            vals = [np.mean([e["stages"][stage]["total_j"] for e in per_rtt[r]]) for r in rtts]
            ax.bar(x + (i - 1) * width, vals, width, label=stage)
        ax.set_xticks(x, [f"{r:g} ms" for r in rtts])
        ax.set_ylabel("energy per epoch (J)")
        ax.set_title(f"{mode}: energy by stage and epoch time")
        ax2 = ax.twinx()
        ax2.plot(x, [np.mean([e["wall_time_s"] for e in per_rtt[r]]) for r in rtts], "k.-", label="epoch time")
        ax2.set_ylabel("epoch time (s)")
        ax.legend(loc="upper left")
        path = out / f"{mode}.png"
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        files.append(path)
    return files
