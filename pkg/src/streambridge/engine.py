"""Micro-batching analysis engine.

Every trigger interval the scheduler discovers streams on all endpoints,
pulls each stream's unconsumed records into one micro-batch, and hands the
batches (partitions) to a worker pool. Each worker folds its batch into the
stream's snapshot window and runs DMD either in-process or through an
external command speaking the line protocol below:

    request:  STREAM <key> <n> <m>\\n  then m lines "<step> <v1> ... <vn>", then a blank line
    reply:    RESULT <key> <step_lo> <step_hi> <metric> <r> <re1> <im1> ... <re_r> <im_r>
"""

from __future__ import annotations

import csv
import json
import logging
import shlex
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import EndpointAddress, InvalidArgument, StreamRecord
from .dmd import DEFAULT_SVD_TOL, DEFAULT_WINDOW, SnapshotWindow, compute_dmd, update_window

log = logging.getLogger(__name__)


class AnalyzerProtocolError(Exception):
    pass


class AnalyzerError(Exception):
    pass


# -- float text formatting ----------------------------------------------------


def fmt_float(x: float) -> str:
    """Shortest decimal that round-trips; integral values lose the '.0'."""
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def fmt_complex(z: complex) -> str:
    return f"{fmt_float(z.real)}{'+' if z.imag >= 0 or np.isnan(z.imag) else '-'}{fmt_float(abs(z.imag))}j"


# -- pipe protocol ------------------------------------------------------------


def pipe_encode_partition(stream_key: str, window: SnapshotWindow) -> str:
    mat = window.matrix()
    lines = [f"STREAM {stream_key} {window.n} {len(window)}"]
    for j, step in enumerate(window.steps):
        lines.append(" ".join([str(step), *(fmt_float(v) for v in mat[:, j])]))
    return "\n".join(lines) + "\n\n"


def pipe_decode_request(lines) -> tuple[str, list[tuple[int, list[float]]]] | None:
    """Read one request block from an iterator of lines; None at end of input."""
    header = ""
    for header in lines:
        if header.strip():
            break
    else:
        return None
    parts = header.split()
    if len(parts) != 4 or parts[0] != "STREAM":
        raise AnalyzerProtocolError(f"bad request header {header.strip()!r}")
    key, n, m = parts[1], int(parts[2]), int(parts[3])
    rows = []
    for _ in range(m):
        tokens = next(lines, "").split()
        if len(tokens) != n + 1:
            raise AnalyzerProtocolError(f"snapshot row has {len(tokens) - 1} values, expected {n}")
        rows.append((int(tokens[0]), [float(t) for t in tokens[1:]]))
    blank = next(lines, "")
    if blank.strip():
        raise AnalyzerProtocolError("request block not terminated by a blank line")
    return key, rows


def format_result(stream_key: str, step_lo: int, step_hi: int, metric: float,
                  eigenvalues: Sequence[complex]) -> str:
    parts = ["RESULT", stream_key, str(step_lo), str(step_hi), fmt_float(metric), str(len(eigenvalues))]
    for z in eigenvalues:
        parts += [fmt_float(z.real), fmt_float(z.imag)]
    return " ".join(parts)


@dataclass(frozen=True)
class PipeResult:
    stream_key: str
    step_lo: int
    step_hi: int
    stability_metric: float
    eigenvalues: tuple[complex, ...]


def pipe_decode_result(line: str) -> PipeResult:
    tokens = line.split()
    if not tokens or tokens[0] != "RESULT":
        if tokens and tokens[0] == "ERROR":
            raise AnalyzerError(" ".join(tokens[2:]) or "analyzer reported an error")
        raise AnalyzerProtocolError(f"reply does not start with RESULT: {line.strip()!r}")
    try:
        if len(tokens) < 6:
            raise ValueError("too few fields")
        r = int(tokens[5])
        if r < 1 or len(tokens) != 6 + 2 * r:
            raise ValueError(f"{len(tokens)} fields for rank {r}")
        nums = [float(t) for t in tokens[6:]]
        return PipeResult(
            stream_key=tokens[1],
            step_lo=int(tokens[2]),
            step_hi=int(tokens[3]),
            stability_metric=float(tokens[4]),
            eigenvalues=tuple(complex(nums[i], nums[i + 1]) for i in range(0, 2 * r, 2)),
        )
    except ValueError as exc:
        raise AnalyzerProtocolError(f"malformed RESULT line ({exc}): {line.strip()!r}") from exc


# -- analyzers ----------------------------------------------------------------


class Analyzer(Protocol):
    def analyze(self, stream_key: str, window: SnapshotWindow) -> PipeResult: ...


class InProcessAnalyzer:
    def __init__(self, svd_tol: float = DEFAULT_SVD_TOL, r_max: int | None = None):
        self.svd_tol = svd_tol
        self.r_max = r_max

    def analyze(self, stream_key: str, window: SnapshotWindow) -> PipeResult:
        res = compute_dmd(window, self.svd_tol, self.r_max)
        steps = window.steps
        return PipeResult(stream_key, steps[0], steps[-1], res.stability_metric, res.eigenvalues)

    def __repr__(self):
        return "inproc"


class PipeAnalyzer:
    """Runs ``command`` once per partition, writing the request to its stdin."""

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise InvalidArgument("empty analyzer command")
        self.timeout = timeout

    def analyze(self, stream_key: str, window: SnapshotWindow) -> PipeResult:
        request = pipe_encode_partition(stream_key, window)
        try:
            proc = subprocess.run(
                self.argv, input=request, capture_output=True, text=True, timeout=self.timeout
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise AnalyzerError(f"analyzer process failed: {exc}") from exc
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if not lines:
            raise AnalyzerError(
                f"analyzer exited {proc.returncode} without output: {proc.stderr.strip()[-200:]}"
            )
        result = pipe_decode_result(lines[-1])
        steps = window.steps
        if (result.stream_key, result.step_lo, result.step_hi) != (stream_key, steps[0], steps[-1]):
            raise AnalyzerProtocolError(
                f"reply for {result.stream_key} [{result.step_lo},{result.step_hi}] does not "
                f"match request {stream_key} [{steps[0]},{steps[-1]}]"
            )
        return result

    def __repr__(self):
        return "pipe:" + shlex.join(self.argv)


def make_analyzer(spec: str, svd_tol: float = DEFAULT_SVD_TOL, r_max: int | None = None):
    if spec == "inproc":
        return InProcessAnalyzer(svd_tol, r_max)
    if spec.startswith("pipe:"):
        return PipeAnalyzer(spec[len("pipe:"):])
    raise InvalidArgument(f"unknown analyzer {spec!r}; use inproc or pipe:CMD")


# -- batches and report rows ---------------------------------------------------


@dataclass
class EngineConfig:
    endpoints: list[EndpointAddress]
    trigger_interval: float = 3.0
    max_records_per_pull: int = 1024
    analyzer: str = "inproc"
    parallelism: int | None = None  # None: one worker per partition in the cycle
    window: int = DEFAULT_WINDOW
    svd_tol: float = DEFAULT_SVD_TOL
    r_max: int | None = None

    def __post_init__(self):
        if self.trigger_interval <= 0:
            raise InvalidArgument("trigger_interval must be > 0")
        if self.max_records_per_pull < 1:
            raise InvalidArgument("max_records_per_pull must be >= 1")
        if self.parallelism is not None and self.parallelism < 1:
            raise InvalidArgument("parallelism must be >= 1")
        if self.window < 2:
            raise InvalidArgument("window must hold at least 2 snapshots")


@dataclass
class MicroBatch:
    stream_key: str
    records: list[StreamRecord]
    trigger_seq: int

    def __post_init__(self):
        if not self.records:
            raise InvalidArgument("micro-batch must be nonempty")
        steps = [r.step for r in self.records]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidArgument("micro-batch steps must be strictly increasing")

    @property
    def steps(self) -> list[int]:
        return [r.step for r in self.records]


REPORT_COLUMNS = [
    "stream_key", "trigger_seq", "step_lo", "step_hi", "n_records",
    "window_lo", "window_hi", "window_size", "status", "stability_metric",
    "rank", "eigenvalues", "analyzed_at_ns", "latency_min_s", "latency_max_s",
    "latency_mean_s", "detail",
]
TIMESTAMP_COLUMNS = ("analyzed_at_ns", "latency_min_s", "latency_max_s", "latency_mean_s")


@dataclass
class AnalysisReportRow:
    stream_key: str
    trigger_seq: int
    step_lo: int
    step_hi: int
    n_records: int
    window_lo: int
    window_hi: int
    window_size: int
    status: str  # ok | warming-up | error
    stability_metric: float | None
    eigenvalues: tuple[complex, ...]
    analyzed_at_ns: int
    latency_min_s: float
    latency_max_s: float
    latency_mean_s: float
    detail: str = ""
    steps: list[int] = field(default_factory=list, repr=False)

    def csv_row(self) -> list:
        return [
            self.stream_key, self.trigger_seq, self.step_lo, self.step_hi, self.n_records,
            self.window_lo, self.window_hi, self.window_size, self.status,
            "" if self.stability_metric is None else fmt_float(self.stability_metric),
            len(self.eigenvalues) if self.eigenvalues else "",
            ";".join(fmt_complex(z) for z in self.eigenvalues),
            self.analyzed_at_ns, f"{self.latency_min_s:.6f}", f"{self.latency_max_s:.6f}",
            f"{self.latency_mean_s:.6f}", self.detail,
        ]

    @classmethod
    def from_csv(cls, row: dict) -> "AnalysisReportRow":
        eigs = row["eigenvalues"]
        metric = row["stability_metric"]
        return cls(
            stream_key=row["stream_key"],
            trigger_seq=int(row["trigger_seq"]),
            step_lo=int(row["step_lo"]),
            step_hi=int(row["step_hi"]),
            n_records=int(row["n_records"]),
            window_lo=int(row["window_lo"]),
            window_hi=int(row["window_hi"]),
            window_size=int(row["window_size"]),
            status=row["status"],
            stability_metric=float(metric) if metric else None,
            eigenvalues=tuple(complex(z) for z in eigs.split(";")) if eigs else (),
            analyzed_at_ns=int(row["analyzed_at_ns"]),
            latency_min_s=float(row["latency_min_s"]),
            latency_max_s=float(row["latency_max_s"]),
            latency_mean_s=float(row["latency_mean_s"]),
            detail=row["detail"],
        )


def read_report(path) -> list[AnalysisReportRow]:
    with open(path, newline="") as fh:
        return [AnalysisReportRow.from_csv(row) for row in csv.DictReader(fh)]


def dispatch_partition(batch: MicroBatch, window: SnapshotWindow, analyzer) -> AnalysisReportRow:
    """Fold a batch into its stream's window and analyze. Never raises."""
    status, detail, metric, eigs = "ok", "", None, ()
    try:
        for rec in batch.records:
            update_window(window, rec)
        if len(window) < 2:
            status = "warming-up"
        else:
            result = analyzer.analyze(batch.stream_key, window)
            metric, eigs = result.stability_metric, tuple(result.eigenvalues)
    except Exception as exc:
        status, detail = "error", f"{type(exc).__name__}: {exc}"
    analyzed_at = time.monotonic_ns()
    lat = np.array([(analyzed_at - r.produced_at) / 1e9 for r in batch.records])
    steps = window.steps
    return AnalysisReportRow(
        stream_key=batch.stream_key,
        trigger_seq=batch.trigger_seq,
        step_lo=batch.records[0].step,
        step_hi=batch.records[-1].step,
        n_records=len(batch.records),
        window_lo=steps[0] if steps else 0,
        window_hi=steps[-1] if steps else 0,
        window_size=len(steps),
        status=status,
        stability_metric=metric,
        eigenvalues=eigs,
        analyzed_at_ns=analyzed_at,
        latency_min_s=float(lat.min()),
        latency_max_s=float(lat.max()),
        latency_mean_s=float(lat.mean()),
        detail=detail.replace("\n", " "),
        steps=batch.steps,
    )


# -- engine ---------------------------------------------------------------------


class RecordSource(Protocol):
    def list_streams(self) -> list[str]: ...

    def read_since(self, stream_key: str, after_step: int, max_records: int): ...


class _Sinks:
    """Append-only report CSV plus the per-record consumption log."""

    def __init__(self, report_path=None, records_path=None):
        self._report = self._records = None
        if report_path:
            Path(report_path).parent.mkdir(parents=True, exist_ok=True)
            self._report_fh = open(report_path, "w", newline="")
            self._report = csv.writer(self._report_fh)
            self._report.writerow(REPORT_COLUMNS)
            self._report_fh.flush()
        if records_path:
            Path(records_path).parent.mkdir(parents=True, exist_ok=True)
            self._records_fh = open(records_path, "w", newline="")
            self._records = csv.writer(self._records_fh)
            self._records.writerow(["stream_key", "step", "trigger_seq", "analyzed_at_ns"])

    def write(self, rows: list[AnalysisReportRow]):
        if self._report:
            self._report.writerows(r.csv_row() for r in rows)
            self._report_fh.flush()
        if self._records:
            for r in rows:
                self._records.writerows(
                    [r.stream_key, s, r.trigger_seq, r.analyzed_at_ns] for s in r.steps
                )
            self._records_fh.flush()

    def close(self):
        if self._report:
            self._report_fh.close()
        if self._records:
            self._records_fh.close()


class StreamEngine:
    def __init__(self, config: EngineConfig, sources: Sequence[RecordSource] | None = None,
                 analyzer=None, report_path=None, records_path=None):
        self.config = config
        if sources is None:
            from .endpoint import EndpointClient

            sources = [EndpointClient(ep) for ep in config.endpoints]
        self.sources = list(sources)
        self.analyzer = analyzer or make_analyzer(config.analyzer, config.svd_tol, config.r_max)
        self.cursors: dict[str, int] = {}
        self.owner: dict[str, int] = {}
        self.windows: dict[str, SnapshotWindow] = {}
        self.trigger_seq = 0
        self.degraded_cycles = 0
        self.cycle_starts: list[int] = []
        self.rows: list[AnalysisReportRow] = []
        self.started_at_ns = time.monotonic_ns()
        self._sinks = _Sinks(report_path, records_path)
        self._drain = threading.Event()
        self._stopped = threading.Event()

    # one scheduler thread calls this; it owns cursors and discovery state
    def run_trigger_cycle(self) -> list[MicroBatch]:
        seq = self.trigger_seq
        self.trigger_seq += 1
        degraded = False
        for idx, src in enumerate(self.sources):
            try:
                for key in src.list_streams():
                    self.owner.setdefault(key, idx)
                    self.cursors.setdefault(key, 0)
            except Exception as exc:
                degraded = True
                log.warning("cycle %d degraded: endpoint %d unreachable: %s", seq, idx, exc)
        batches = []
        page = self.config.max_records_per_pull
        for key in sorted(self.owner):
            src = self.sources[self.owner[key]]
            after = self.cursors[key]
            pulled: list[StreamRecord] = []
            try:
                while True:
                    records, found = src.read_since(key, after, page)
                    if not records:
                        break
                    pulled.extend(StreamRecord(key, r.step, r.values, r.produced_at_ns) for r in records)
                    after = records[-1].step
                    if len(records) < page:
                        break
            except Exception as exc:
                degraded = True
                log.warning("cycle %d degraded: read of %s failed: %s", seq, key, exc)
            if pulled:
                self.cursors[key] = pulled[-1].step
                batches.append(MicroBatch(key, pulled, seq))
        if degraded:
            self.degraded_cycles += 1
        return batches

    def _window_for(self, batch: MicroBatch) -> SnapshotWindow:
        window = self.windows.get(batch.stream_key)
        if window is None:
            n = batch.records[0].payload.size
            window = self.windows[batch.stream_key] = SnapshotWindow(n, self.config.window)
        return window

    def dispatch(self, batches: list[MicroBatch]) -> list[AnalysisReportRow]:
        if not batches:
            return []
        workers = self.config.parallelism or len(batches)
        jobs = [(b, self._window_for(b)) for b in batches]
        if workers == 1 or len(jobs) == 1:
            rows = [dispatch_partition(b, w, self.analyzer) for b, w in jobs]
        else:
            # each window is lent to exactly one worker; batches are one per stream
            with ThreadPoolExecutor(min(workers, len(jobs))) as pool:
                rows = list(pool.map(lambda job: dispatch_partition(job[0], job[1], self.analyzer), jobs))
        self.rows.extend(rows)
        self._sinks.write(rows)
        return rows

    def cycle(self) -> list[AnalysisReportRow]:
        self.cycle_starts.append(time.monotonic_ns())
        return self.dispatch(self.run_trigger_cycle())

    def request_drain(self):
        """Ask the loop to run exactly one more cycle and stop."""
        self._drain.set()

    def run(self, duration: float | None = None) -> None:
        interval = self.config.trigger_interval
        t0 = time.monotonic()
        next_tick = t0 + interval
        try:
            while True:
                delay = next_tick - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                final = self._drain.is_set() or (
                    duration is not None and time.monotonic() - t0 >= duration
                )
                self.cycle()
                if final:
                    break
                next_tick += interval
                now = time.monotonic()
                if next_tick < now:
                    # overran; skip missed ticks instead of bursting
                    next_tick += ((now - next_tick) // interval + 1) * interval
        finally:
            self._stopped.set()
            self.close()

    def close(self):
        self._sinks.close()
        for src in self.sources:
            close = getattr(src, "close", None)
            if close:
                close()

    def summary(self) -> dict:
        streams: dict[str, dict] = {}
        latencies = []
        for row in self.rows:
            s = streams.setdefault(
                row.stream_key, {"records": 0, "batches": 0, "ok": 0, "warming-up": 0, "error": 0}
            )
            s["records"] += row.n_records
            s["batches"] += 1
            s[row.status] += 1
            latencies.append(row.latency_max_s)
        lat = np.array(latencies) if latencies else np.zeros(0)
        return {
            "cycles": self.trigger_seq,
            "degraded_cycles": self.degraded_cycles,
            "started_at_ns": self.started_at_ns,
            "first_analyzed_at_ns": min((r.analyzed_at_ns for r in self.rows), default=None),
            "last_analyzed_at_ns": max((r.analyzed_at_ns for r in self.rows), default=None),
            "records": sum(s["records"] for s in streams.values()),
            "streams": dict(sorted(streams.items())),
            "batch_latency_max_s": {
                "p50": float(np.percentile(lat, 50)) if lat.size else None,
                "p95": float(np.percentile(lat, 95)) if lat.size else None,
                "max": float(lat.max()) if lat.size else None,
            },
            "cycle_starts_ns": self.cycle_starts,
        }

    def write_summary(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
