"""Command-line entry point: ``streambridge <verb> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .core import EndpointAddress, InvalidArgument, parse_endpoint_list

log = logging.getLogger("streambridge")


def _cmd_run(args) -> int:
    from .bench import run_workflow

    status, out = run_workflow(args.config, args.out)
    if out is not None:
        print(f"artifacts: {out}")
    return status


def _cmd_report(args) -> int:
    from .bench import scaling_report

    out = args.out or args.dirs[0]
    paths = scaling_report(args.dirs, out)
    for p in paths.values():
        print(p)
    return 0


def _cmd_simgen(args) -> int:
    from .sim import SimConfig, run_generator

    try:
        cfg = SimConfig(
            world_size=args.ranks,
            dynamics=args.dynamics,
            total_steps=args.steps,
            write_interval=args.interval,
            step_compute_delay=args.delay_ms / 1000.0,
            io_mode=args.io,
            field_name=args.field,
            queue_capacity=args.queue_capacity,
            backpressure=args.backpressure,
            file_fsync=not args.no_fsync,
            workers=args.workers,
        )
    except InvalidArgument as exc:
        log.error("%s", exc)
        return 1
    stats = run_generator(cfg, args.log)
    print(json.dumps({k: v for k, v in stats.summary().items() if k != "ranks"}))
    return 2 if stats.failed_ranks else 0


def _cmd_endpoint(args) -> int:
    from .endpoint import serve

    try:
        server = serve(EndpointAddress.parse(args.bind), args.retention, stats_file=args.stats_file)
    except OSError as exc:
        log.error("%s", exc)
        return 2
    log.info("endpoint listening on %s", server.address)
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    if hasattr(signal, "SIGUSR1") and args.stats_file:
        signal.signal(signal.SIGUSR1, lambda *_: server._stats.snapshot())
    stop.wait()
    server.shutdown()
    return 0


def _cmd_engine(args) -> int:
    from .engine import EngineConfig, StreamEngine

    out = Path(args.out)
    try:
        cfg = EngineConfig(
            endpoints=parse_endpoint_list(args.endpoints),
            trigger_interval=args.trigger_ms / 1000.0,
            max_records_per_pull=args.max_records,
            analyzer=args.analyzer,
            parallelism=args.parallelism,
            window=args.window,
        )
        engine = StreamEngine(
            cfg,
            report_path=out,
            records_path=args.records_log or out.with_name("records.csv"),
        )
    except InvalidArgument as exc:
        log.error("%s", exc)
        return 1
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: engine.request_drain())
    engine.run(duration=args.duration_s)
    engine.write_summary(args.summary or out.with_name("summary.json"))
    return 0


def _read_snapshot_csv(path: Path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh)):
            if not rec or not rec[0].strip():
                continue
            try:
                rows.append((int(rec[0]), [float(v) for v in rec[1:]]))
            except ValueError:
                if lineno == 0:
                    continue  # header
                raise ValueError(f"line {lineno + 1}: not a step,v1,...,vn row") from None
    return rows


def _cmd_analyze_file(args) -> int:
    from .dmd import DmdError, SnapshotWindow, compute_dmd
    from .engine import AnalyzerProtocolError, format_result, pipe_decode_request

    def analyze(key, rows) -> str:
        window = SnapshotWindow.from_rows(rows)
        res = compute_dmd(window, args.svd_tol)
        steps = window.steps
        return format_result(key, steps[0], steps[-1], res.stability_metric, res.eigenvalues)

    if args.input and args.input != "-":
        path = Path(args.input)
        try:
            print(analyze(args.stream_key or path.stem, _read_snapshot_csv(path)))
        except (DmdError, ValueError) as exc:
            print(f"ERROR {args.stream_key or path.stem} {exc}")
            return 2
        return 0

    status = 0
    lines = iter(sys.stdin.readline, "")
    while True:
        try:
            req = pipe_decode_request(lines)
        except (AnalyzerProtocolError, ValueError) as exc:
            print(f"ERROR - {exc}", flush=True)
            return 2
        if req is None:
            return status
        key, rows = req
        try:
            print(analyze(key, rows), flush=True)
        except (DmdError, ValueError) as exc:
            print(f"ERROR {key} {exc}", flush=True)
            status = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streambridge", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("run", help="run one end-to-end workflow from a JSON config")
    s.add_argument("config")
    s.add_argument("--out", help="artifact directory (default: config output_dir)")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("report", help="cross-run scaling table and figure")
    s.add_argument("dirs", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=_cmd_report)

    s = sub.add_parser("simgen", help="synthetic simulation generator")
    s.add_argument("--ranks", type=int, required=True)
    s.add_argument("--dynamics", required=True,
                   help="linear:a,b;c,d | diffusion:n,mu | random:count,seed")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--interval", type=int, default=5)
    s.add_argument("--delay-ms", type=float, default=0.0)
    s.add_argument("--io", default="off", help="broker:EPLIST | file:DIR | off")
    s.add_argument("--log", help="directory for emissions.csv and generator.json")
    s.add_argument("--field", default="pressure")
    s.add_argument("--queue-capacity", type=int, default=64)
    s.add_argument("--backpressure", choices=["block", "drop-newest"], default="block")
    s.add_argument("--no-fsync", action="store_true", help="file mode: skip per-emission fsync")
    s.add_argument("--workers", choices=["process", "thread"], default="process")
    s.set_defaults(func=_cmd_simgen)

    s = sub.add_parser("endpoint", help="in-memory stream endpoint server")
    s.add_argument("--bind", default="0.0.0.0:6379")
    s.add_argument("--retention", type=int, default=4096)
    s.add_argument("--stats-file")
    s.set_defaults(func=_cmd_endpoint)

    s = sub.add_parser("engine", help="micro-batching DMD analysis engine")
    s.add_argument("--endpoints", required=True)
    s.add_argument("--trigger-ms", type=int, default=3000)
    s.add_argument("--analyzer", default="inproc", help='inproc | pipe:"CMD"')
    s.add_argument("--window", type=int, default=16)
    s.add_argument("--out", default="report.csv")
    s.add_argument("--records-log")
    s.add_argument("--summary")
    s.add_argument("--parallelism", type=int)
    s.add_argument("--max-records", type=int, default=1024)
    s.add_argument("--duration-s", type=float, help="stop after this long (default: until signalled)")
    s.set_defaults(func=_cmd_engine)

    s = sub.add_parser("analyze-file", help="DMD on a snapshot CSV, or pipe protocol on stdin")
    s.add_argument("--input", help="CSV of step,v1,...,vn rows; omit to read requests from stdin")
    s.add_argument("--stream-key")
    s.add_argument("--svd-tol", type=float, default=1e-10)
    s.set_defaults(func=_cmd_analyze_file)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
