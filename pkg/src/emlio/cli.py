"""Command line entry point: ``emlio <subcommand> ...``.

Every subcommand is a thin shell over the library; exit status is 0 on
success, 1 when the run completed but failed (incomplete epochs, failed
bench checks) and 2 on bad arguments or unreadable inputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from emlio.events import EventLogger


def _ints(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _dump(doc, out) -> None:
    text = json.dumps(doc, indent=2)
    if out is None or str(out) == "-":
        print(text)
    else:
        Path(out).write_text(text + "\n")


def cmd_convert(args) -> int:
    from emlio.recordfmt import convert_dataset

    indexes = convert_dataset(args.input_dir, args.output_dir, args.samples_per_shard)
    total = sum(ix.total_samples for ix in indexes)
    print(f"wrote {len(indexes)} shards, {total} samples to {args.output_dir}")
    return 0


def cmd_plan(args) -> int:
    from emlio.planner import parse_nodes, plan, plan_to_json
    from emlio.recordfmt import load_indexes

    p = plan(load_indexes(args.data_dir), parse_nodes(args.nodes), args.batch_size, args.epochs,
             args.threads, args.seed)
    _dump(plan_to_json(p), args.out)
    return 0


def cmd_serve(args) -> int:
    from emlio.sender import SenderConfig, run_sender
    from emlio.transport import ChannelConfig

    channel = ChannelConfig(hwm=args.hwm, one_way_delay_ms=args.one_way_delay_ms,
                            connect_timeout=args.connect_timeout)
    with EventLogger(args.events) as events:
        summary = run_sender(SenderConfig(args.plan, args.node_id, args.data_dir, workers=args.threads,
                                          channel=channel, events=events, target=args.target))
    if args.summary:
        _dump(summary.to_json(), args.summary)
    if summary.error:
        print(f"serve failed: {summary.error}", file=sys.stderr)
    return 0 if summary.completed else 1


def cmd_consume(args) -> int:
    from emlio.planner import deserialize_plan
    from emlio.receiver import ReceiverConfig, run_receiver
    from emlio.transport import ChannelConfig

    p = deserialize_plan(Path(args.plan).read_bytes())
    epochs = args.epochs or p.epochs
    config = ReceiverConfig(args.listen, args.prefetch, args.senders or p.threads_per_node,
                            args.compute_ms, epochs, args.node_id, ChannelConfig(hwm=args.hwm))
    with EventLogger(args.events) as events:
        summaries = run_receiver(config, events=events, plan=p,
                                 ready=lambda a: print(f"listening on {a[0]}:{a[1]}", flush=True))
    _dump({"node_id": args.node_id, "epochs": [s.to_json() for s in summaries]}, args.summary)
    ok = len(summaries) == epochs and all(s.complete and s.matches_plan is not False for s in summaries)
    return 0 if ok else 1


def cmd_monitor(args) -> int:
    from emlio.energymon import MonitorConfig, parse_source_spec, run_monitor

    config = MonitorConfig(args.out, args.node_id, args.interval_ms / 1000, batch_size=args.batch_size)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    handle = run_monitor(config, parse_source_spec(args.sources))
    stop.wait(args.duration_s)
    handle.stop()
    print(f"{handle.points_written} points written to {args.out}", file=sys.stderr)
    for w in handle.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_bench_compare(args) -> int:
    from emlio.bench import Workload, compare

    workload = Workload(num_samples=args.samples, sample_bytes=args.sample_bytes, batch_size=args.batch_size,
                        epochs=args.epochs, rtt_list=args.rtt, compute_ms=args.compute_ms,
                        threads=args.threads, hwm=args.hwm, prefetch=args.prefetch,
                        samples_per_shard=args.samples_per_shard, seed=args.seed)
    report = compare(workload, args.out, args.work_dir, args.plots, args.sources,
                     args.energy_interval_ms, args.repeats)
    for name, check in report["checks"].items():
        print(f"{'PASS' if check['pass'] else 'FAIL'} {name}: {check['value']} (want {check['threshold']})")
    return 0 if report["ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emlio", description="Pipelined batch streaming with energy accounting.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="pack a class-per-directory tree into record shards")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--samples-per-shard", type=int, required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("plan", help="assign batch ranges to nodes and workers")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--nodes", required=True, help="[id=]host:port,... (one compute node each)")
    p.add_argument("--batch-size", type=int, required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("serve", help="stream one node's planned batches")
    p.add_argument("--plan", required=True)
    p.add_argument("--node-id", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--hwm", type=int, default=16)
    p.add_argument("--one-way-delay-ms", type=float, default=0.0)
    p.add_argument("--connect-timeout", type=float, default=5.0)
    p.add_argument("--target", type=_addr, default=None, help="override the plan's address for this node")
    p.add_argument("--events", default=None)
    p.add_argument("--summary", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("consume", help="receive and consume one node's batches")
    p.add_argument("--listen", type=_addr, required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--node-id", required=True)
    p.add_argument("--prefetch", type=int, default=2)
    p.add_argument("--compute-ms", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=None, help="defaults to the plan's epoch count")
    p.add_argument("--senders", type=int, default=None, help="streams per epoch; defaults to the plan's threads")
    p.add_argument("--hwm", type=int, default=16)
    p.add_argument("--events", default=None)
    p.add_argument("--summary", default="-")
    p.set_defaults(func=cmd_consume)

    p = sub.add_parser("monitor", help="sample power sources into an energy log")
    p.add_argument("--interval-ms", type=float, default=100.0)
    p.add_argument("--sources", default="rapl")
    p.add_argument("--node-id", default="node")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--duration-s", type=float, default=None, help="stop after this long (default: until SIGINT)")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("bench", help="experiments")
    bench = p.add_subparsers(dest="bench_command", required=True)
    c = bench.add_parser("compare", help="pipelined vs per-request loading across RTTs")
    c.add_argument("--samples", type=int, default=1000)
    c.add_argument("--sample-bytes", type=int, default=65536)
    c.add_argument("--batch-size", type=int, default=32)
    c.add_argument("--epochs", type=int, default=1)
    c.add_argument("--rtt", type=_ints, default=(0.0, 10.0, 30.0), help="RTTs in ms, e.g. 0,10,30")
    c.add_argument("--compute-ms", type=float, default=2.0)
    c.add_argument("--threads", type=int, default=1)
    c.add_argument("--hwm", type=int, default=16)
    c.add_argument("--prefetch", type=int, default=2)
    c.add_argument("--samples-per-shard", type=int, default=128)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--repeats", type=int, default=1)
    c.add_argument("--sources", default="synthetic:cpu:50,synthetic:dram:5,synthetic:gpu:100")
    c.add_argument("--energy-interval-ms", type=float, default=5.0)
    c.add_argument("--work-dir", default=None)
    c.add_argument("--out", default=None)
    c.add_argument("--plots", default=None)
    c.set_defaults(func=cmd_bench_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"emlio {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
