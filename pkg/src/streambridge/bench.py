"""Workflow orchestration and post-run metrics.

``run_workflow`` starts endpoints, the engine and the generator as child
processes, drains the engine once the generator exits, then reconciles the
generator's emission log with endpoint stats and the engine's consumption
log to produce ``metrics.json``, ``report.csv`` and the figures.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shlex
import signal
import socket
import subprocess
import sys
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .broker import ENDPOINTS_ENV
from .core import EndpointAddress, InvalidArgument, parse_endpoint_list
from .engine import REPORT_COLUMNS, AnalysisReportRow, read_report
from .sim import parse_dynamics

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_RECONCILE = 3


class ConfigError(ValueError):
    pass


class ReconciliationError(Exception):
    def __init__(self, message: str, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


# -- configuration ----------------------------------------------------------


@dataclass
class GeneratorSection:
    ranks: int
    dynamics: str = "random:256,0"
    steps: int = 2000
    interval: int = 5
    delay_ms: float = 10.0
    field: str = "pressure"
    queue_capacity: int = 64
    backpressure: str = "block"


@dataclass
class EngineSection:
    trigger_ms: int = 3000
    analyzer: str = "inproc"
    window: int = 16
    parallelism: int | None = None
    max_records_per_pull: int = 1024
    endpoints: list[str] | None = None


@dataclass
class WorkflowConfig:
    generator: GeneratorSection
    endpoints: list[EndpointAddress]
    engine: EngineSection = field(default_factory=EngineSection)
    retention: int = 4096
    output_dir: str | None = None
    startup_timeout_s: float = 15.0
    drain_timeout_s: float = 120.0

    @property
    def ratio(self) -> str:
        parallelism = self.engine.parallelism or self.generator.ranks
        return f"{self.generator.ranks}:{len(self.endpoints)}:{parallelism}"

    @property
    def element_count(self) -> int:
        return parse_dynamics(self.generator.dynamics).element_count

    @classmethod
    def from_dict(cls, data: dict, environ=None) -> "WorkflowConfig":
        environ = os.environ if environ is None else environ
        try:
            data = dict(data)
            gen = GeneratorSection(**data.pop("generator"))
            eng = EngineSection(**data.pop("engine", {}))
            override = environ.get(ENDPOINTS_ENV, "").strip()
            endpoints = parse_endpoint_list(override or ",".join(data.pop("endpoints")))
            data.pop("endpoints", None)
            cfg = cls(generator=gen, endpoints=endpoints, engine=eng, **data)
        except (KeyError, TypeError, InvalidArgument) as exc:
            raise ConfigError(f"invalid workflow config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, environ=None) -> "WorkflowConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, environ)

    def validate(self) -> None:
        g = self.generator
        if g.ranks < 1:
            raise ConfigError("generator.ranks must be >= 1")
        if not 1 <= len(self.endpoints) <= g.ranks:
            raise ConfigError(f"need 1..{g.ranks} endpoints, got {len(self.endpoints)}")
        if len(set(self.endpoints)) != len(self.endpoints):
            raise ConfigError("duplicate endpoint addresses")
        if self.engine.endpoints is not None:
            eng_eps = parse_endpoint_list(",".join(self.engine.endpoints))
            if eng_eps != self.endpoints:
                raise ConfigError(
                    "engine endpoints do not match generator endpoints: "
                    f"{[str(e) for e in eng_eps]} != {[str(e) for e in self.endpoints]}"
                )
        if g.steps < 1 or g.interval < 1 or g.delay_ms < 0:
            raise ConfigError("generator steps/interval must be >= 1 and delay_ms >= 0")
        if g.backpressure not in ("block", "drop-newest"):
            raise ConfigError(f"unknown backpressure {g.backpressure!r}")
        if self.engine.trigger_ms <= 0:
            raise ConfigError("engine.trigger_ms must be > 0")
        if self.engine.window < 2:
            raise ConfigError("engine.window must be >= 2")
        if self.engine.parallelism is not None and self.engine.parallelism < 1:
            raise ConfigError("engine.parallelism must be >= 1")
        if self.retention < 1:
            raise ConfigError("retention must be >= 1")
        try:
            parse_dynamics(g.dynamics)
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc
        if not (self.engine.analyzer == "inproc" or self.engine.analyzer.startswith("pipe")):
            raise ConfigError(f"unknown analyzer {self.engine.analyzer!r}")


# -- log loading --------------------------------------------------------------


def load_emissions(path) -> list[tuple[str, int, int]]:
    with open(path, newline="") as fh:
        return [(r["stream_key"], int(r["step"]), int(r["produced_at_ns"])) for r in csv.DictReader(fh)]


def load_consumed(path) -> list[tuple[str, int, int]]:
    with open(path, newline="") as fh:
        return [(r["stream_key"], int(r["step"]), int(r["analyzed_at_ns"])) for r in csv.DictReader(fh)]


def load_endpoint_stats(paths) -> dict[str, int]:
    from .endpoint import read_final_stats

    stored: dict[str, int] = {}
    for p in paths:
        for key, st in read_final_stats(p).items():
            stored[key] = stored.get(key, 0) + st["records_total"]
    return stored


# -- metrics ------------------------------------------------------------------


@dataclass
class LatencyStats:
    count: int
    p50: float
    p95: float
    max: float
    mean: float
    per_stream: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict:
        return {"count": self.count, "p50": self.p50, "p95": self.p95, "max": self.max, "mean": self.mean}


def measure_latency(emissions, consumed) -> LatencyStats:
    """Per-record analyzed_at - produced_at, joined on (stream_key, step).

    Every consumed record must appear in the emission log.
    """
    produced = {(k, s): t for k, s, t in emissions}
    per_stream: dict[str, list[float]] = defaultdict(list)
    offenders = []
    for key, step, analyzed in consumed:
        t = produced.get((key, step))
        if t is None:
            offenders.append((key, step))
            continue
        per_stream[key].append((analyzed - t) / 1e9)
    if offenders:
        raise ReconciliationError(
            f"{len(offenders)} analyzed records missing from the emission log", offenders
        )
    arrays = {k: np.array(v) for k, v in per_stream.items()}
    every = np.concatenate(list(arrays.values())) if arrays else np.zeros(0)
    if every.size == 0:
        nan = float("nan")
        return LatencyStats(0, nan, nan, nan, nan, arrays)
    return LatencyStats(
        count=int(every.size),
        p50=float(np.percentile(every, 50)),
        p95=float(np.percentile(every, 95)),
        max=float(every.max()),
        mean=float(every.mean()),
        per_stream=arrays,
    )


def reconcile(emissions, consumed, stored: dict[str, int] | None = None) -> dict:
    """Per-stream emitted/stored/analyzed counts with loss and duplication."""
    emitted = Counter(k for k, _, _ in emissions)
    seen = Counter((k, s) for k, s, _ in consumed)
    analyzed = Counter(k for k, _, _ in consumed)
    emitted_keys = {(k, s) for k, s, _ in emissions}
    lost = Counter(k for (k, s) in emitted_keys if (k, s) not in seen)
    duplicated = Counter({k: 0 for k in analyzed})
    for (k, _), n in seen.items():
        if n > 1:
            duplicated[k] += n - 1
    steps_ordered = {}
    by_stream = defaultdict(list)
    for k, s, _ in consumed:
        by_stream[k].append(s)
    for k, steps in by_stream.items():
        steps_ordered[k] = all(b > a for a, b in zip(steps, steps[1:]))
    keys = sorted(set(emitted) | set(analyzed) | set(stored or {}))
    streams = {
        k: {
            "emitted": emitted.get(k, 0),
            "stored": (stored or {}).get(k),
            "analyzed": analyzed.get(k, 0),
            "lost": lost.get(k, 0),
            "duplicated": duplicated.get(k, 0),
            "steps_increasing": steps_ordered.get(k, True),
        }
        for k in keys
    }
    totals = {
        "emitted": sum(emitted.values()),
        "stored": sum(v for v in (stored or {}).values()) if stored is not None else None,
        "analyzed": sum(analyzed.values()),
        "lost": sum(lost.values()),
        "duplicated": sum(duplicated.values()),
    }
    totals["conserved"] = (
        totals["lost"] == 0
        and totals["duplicated"] == 0
        and totals["emitted"] == totals["analyzed"]
        and (totals["stored"] is None or totals["stored"] == totals["emitted"])
        and all(s["steps_increasing"] for s in streams.values())
    )
    return {"totals": totals, "streams": streams}


def build_metrics(config: WorkflowConfig, generator: dict, emissions, consumed,
                  stored: dict[str, int] | None, rows: list[AnalysisReportRow]) -> dict:
    rec = reconcile(emissions, consumed, stored)
    latency = measure_latency(emissions, consumed)
    bytes_per_record = config.element_count * 8
    gen_elapsed = generator["elapsed_s"]
    last_analyzed = max((t for _, _, t in consumed), default=generator["end_ns"])
    end_to_end = (last_analyzed - generator["start_ns"]) / 1e9
    analyzed = rec["totals"]["analyzed"]
    rank_elapsed = {r["stream_key"]: r["elapsed_s"] for r in generator["ranks"]}
    metric_by_stream = defaultdict(list)
    for row in rows:
        if row.status == "ok":
            metric_by_stream[row.stream_key].append(row.stability_metric)
    streams = {}
    for key, counts in rec["streams"].items():
        lat = latency.per_stream.get(key, np.zeros(0))
        elapsed = rank_elapsed.get(key) or gen_elapsed
        streams[key] = {
            **counts,
            "records_per_s": counts["analyzed"] / elapsed if elapsed else 0.0,
            "bytes_per_s": counts["analyzed"] * bytes_per_record / elapsed if elapsed else 0.0,
            "latency_p50_s": float(np.percentile(lat, 50)) if lat.size else None,
            "latency_p95_s": float(np.percentile(lat, 95)) if lat.size else None,
            "latency_max_s": float(lat.max()) if lat.size else None,
            "mean_stability_metric": float(np.mean(metric_by_stream[key])) if metric_by_stream[key] else None,
        }
    return {
        "ranks": config.generator.ranks,
        "endpoints": len(config.endpoints),
        "parallelism": config.engine.parallelism or config.generator.ranks,
        "ratio": config.ratio,
        "trigger_interval_s": config.engine.trigger_ms / 1000.0,
        "element_count": config.element_count,
        "generator_elapsed_s": gen_elapsed,
        "end_to_end_s": end_to_end,
        "lag_s": end_to_end - gen_elapsed,
        "records": rec["totals"],
        "throughput": {
            "records_per_s": analyzed / gen_elapsed if gen_elapsed else 0.0,
            "bytes_per_s": analyzed * bytes_per_record / gen_elapsed if gen_elapsed else 0.0,
        },
        "latency_s": latency.as_dict(),
        "streams": streams,
    }


# -- reporting ------------------------------------------------------------------


def _row_order(row: AnalysisReportRow):
    from .plots import _stream_order

    return (_stream_order(row.stream_key), row.trigger_seq, row.step_lo)


def emit_report(rows: list[AnalysisReportRow], summary: dict, out_dir) -> dict[str, Path]:
    if not rows:
        raise ValueError("no report rows to emit")
    from .plots import plot_stability

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.csv", "metrics": out / "metrics.json",
             "stability": out / "stability.svg"}
    with open(paths["report"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerows(r.csv_row() for r in sorted(rows, key=_row_order))
    with open(paths["metrics"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    plot_stability(rows, paths["stability"])
    return paths


def scaling_report(run_dirs, out_dir) -> dict[str, Path]:
    """Cross-run CSV and figure of throughput/latency against rank count."""
    from .plots import plot_scaling

    summaries = []
    for d in run_dirs:
        with open(Path(d) / "metrics.json") as fh:
            summaries.append(json.load(fh) | {"run_dir": str(d)})
    if not summaries:
        raise ValueError("no runs given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = out / "scaling.csv", out / "scaling.svg"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_dir", "ranks", "endpoints", "parallelism", "records_per_s",
                    "bytes_per_s", "latency_p50_s", "latency_p95_s", "latency_max_s", "lag_s"])
        for s in sorted(summaries, key=lambda s: s["ranks"]):
            w.writerow([s["run_dir"], s["ranks"], s["endpoints"], s["parallelism"],
                        f"{s['throughput']['records_per_s']:.3f}", f"{s['throughput']['bytes_per_s']:.1f}",
                        f"{s['latency_s']['p50']:.4f}", f"{s['latency_s']['p95']:.4f}",
                        f"{s['latency_s']['max']:.4f}", f"{s['lag_s']:.4f}"])
    plot_scaling(summaries, svg_path)
    return {"csv": csv_path, "plot": svg_path}


# -- orchestration ----------------------------------------------------------------


def _cli(*args) -> list[str]:
    return [sys.executable, "-m", "streambridge", *map(str, args)]


def _wait_listening(address: EndpointAddress, proc: subprocess.Popen, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise RuntimeError(f"endpoint {address} exited with status {proc.returncode}")
        try:
            with socket.create_connection((address.host, address.port), 0.5):
                return
        except OSError:
            time.sleep(0.05)
    raise RuntimeError(f"endpoint {address} not listening after {timeout}s")


def _wait_file(path: Path, proc: subprocess.Popen, timeout: float, what: str) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if path.exists():
            return
        if proc.poll() is not None:
            raise RuntimeError(f"{what} exited with status {proc.returncode}")
        time.sleep(0.05)
    raise RuntimeError(f"{what} not ready after {timeout}s")


def _stop(proc: subprocess.Popen, timeout: float) -> int | None:
    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(timeout)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait()
    return proc.returncode


def _analyzer_arg(spec: str) -> str:
    if spec == "pipe":
        return "pipe:" + shlex.join(_cli("analyze-file"))
    return spec


def run_workflow(config: WorkflowConfig | str | Path, out_dir=None) -> tuple[int, Path | None]:
    """Run one end-to-end workflow. Returns (exit status, artifact directory)."""
    try:
        cfg = config if isinstance(config, WorkflowConfig) else WorkflowConfig.load(config)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION, None
    out = Path(out_dir or cfg.output_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    logs = out / "logs"
    logs.mkdir(exist_ok=True)
    manifest: dict = {"status": "running", "ratio": cfg.ratio, "components": {}}
    procs: list[tuple[str, subprocess.Popen]] = []
    handles = []

    def spawn(name: str, argv: list[str]) -> subprocess.Popen:
        fh = open(logs / f"{name}.log", "w")
        handles.append(fh)
        proc = subprocess.Popen(argv, stdout=fh, stderr=subprocess.STDOUT)
        procs.append((name, proc))
        return proc

    eplist = ",".join(str(e) for e in cfg.endpoints)
    engine_dir = out / "engine"
    status = EXIT_OK
    try:
        stats_files = []
        for i, ep in enumerate(cfg.endpoints):
            stats = out / f"endpoint-{i}.csv"
            stats_files.append(stats)
            proc = spawn(f"endpoint-{i}", _cli("endpoint", "--bind", ep, "--retention",
                                               cfg.retention, "--stats-file", stats))
            _wait_listening(ep, proc, cfg.startup_timeout_s)

        e = cfg.engine
        engine_argv = _cli(
            "engine", "--endpoints", eplist, "--trigger-ms", e.trigger_ms,
            "--analyzer", _analyzer_arg(e.analyzer), "--window", e.window,
            "--max-records", e.max_records_per_pull,
            "--out", engine_dir / "report.csv", "--records-log", engine_dir / "records.csv",
            "--summary", engine_dir / "summary.json",
        )
        if e.parallelism:
            engine_argv += ["--parallelism", str(e.parallelism)]
        engine = spawn("engine", engine_argv)
        _wait_file(engine_dir / "report.csv", engine, cfg.startup_timeout_s, "engine")

        g = cfg.generator
        gen = spawn("simgen", _cli(
            "simgen", "--ranks", g.ranks, "--dynamics", g.dynamics, "--steps", g.steps,
            "--interval", g.interval, "--delay-ms", g.delay_ms, "--io", f"broker:{eplist}",
            "--field", g.field, "--queue-capacity", g.queue_capacity,
            "--backpressure", g.backpressure, "--log", out,
        ))
        gen_status = gen.wait()
        manifest["components"]["simgen"] = gen_status
        # drain: the engine runs one more trigger cycle after this signal, then exits
        manifest["components"]["engine"] = _stop(engine, cfg.drain_timeout_s)
        for name, proc in procs:
            if name.startswith("endpoint"):
                manifest["components"][name] = _stop(proc, 15.0)
        if gen_status != 0 or manifest["components"]["engine"] != 0:
            raise RuntimeError(
                f"component failure: simgen={gen_status} engine={manifest['components']['engine']}"
            )

        with open(out / "generator.json") as fh:
            generator = json.load(fh)
        emissions = load_emissions(out / "emissions.csv")
        consumed = load_consumed(engine_dir / "records.csv")
        stored = load_endpoint_stats(stats_files)
        rows = read_report(engine_dir / "report.csv")
        try:
            metrics = build_metrics(cfg, generator, emissions, consumed, stored, rows)
        except ReconciliationError as exc:
            manifest["reconciliation_offenders"] = exc.offenders[:50]
            raise
        if rows:
            emit_report(rows, metrics, out)
        else:
            with open(out / "metrics.json", "w") as fh:
                json.dump(metrics, fh, indent=2, sort_keys=True)
        if g.backpressure == "block" and not metrics["records"]["conserved"]:
            manifest["status"] = "reconciliation-failed"
            status = EXIT_RECONCILE
        else:
            manifest["status"] = "ok"
    except ReconciliationError as exc:
        manifest["status"], manifest["failure"] = "reconciliation-failed", str(exc)
        status = EXIT_RECONCILE
    except Exception as exc:
        log.error("workflow failed: %s", exc)
        manifest["status"], manifest["failure"] = "runtime-failure", str(exc)
        status = EXIT_RUNTIME
    finally:
        for name, proc in procs:
            if proc.poll() is None:
                manifest["components"].setdefault(name, _stop(proc, 5.0))
        for fh in handles:
            fh.close()
        manifest["files"] = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
        with open(out / "MANIFEST.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
    return status, out
