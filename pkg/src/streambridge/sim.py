"""Synthetic stand-in for an MPI simulation.

Each rank owns an independent copy of the dynamics, advances it
``total_steps`` times, and every ``write_interval``-th step emits its state
through the broker, to raw files, or nowhere.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import logging
import multiprocessing
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import EndpointAddress, InvalidArgument, make_stream_key, parse_endpoint_list

log = logging.getLogger(__name__)


# -- dynamics ---------------------------------------------------------------


def step_linear(state, A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    state = np.asarray(state, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != state.shape[0]:
        raise InvalidArgument(f"matrix {A.shape} cannot act on state of length {state.shape[0]}")
    return A @ state


def step_diffusion(state, mu: float) -> np.ndarray:
    """One explicit heat-equation step with zero Dirichlet boundaries."""
    if not 0.0 < mu <= 0.5:
        raise InvalidArgument(f"mu={mu} outside (0, 0.5]")
    u = np.asarray(state, dtype=np.float64)
    padded = np.concatenate(([0.0], u, [0.0]))
    return u + mu * (padded[2:] - 2.0 * u + padded[:-2])


@dataclass(frozen=True)
class Linear:
    matrix: tuple[tuple[float, ...], ...]
    x0: tuple[float, ...] | None = None

    @property
    def element_count(self) -> int:
        return len(self.matrix)

    def initial(self, rank: int) -> np.ndarray:
        if self.x0 is not None:
            return np.array(self.x0, dtype=np.float64)
        return np.ones(self.element_count)

    def advance(self, state, rng=None):
        return step_linear(state, self.matrix)

    def spec(self) -> str:
        return "linear:" + ";".join(",".join(repr(v) for v in row) for row in self.matrix)


@dataclass(frozen=True)
class Diffusion:
    n: int
    mu: float

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgument("diffusion needs at least one interior point")
        if not 0.0 < self.mu <= 0.5:
            raise InvalidArgument(f"diffusion mu={self.mu} outside (0, 0.5]")

    @property
    def element_count(self) -> int:
        return self.n

    def initial(self, rank: int) -> np.ndarray:
        return np.random.default_rng(rank).uniform(0.0, 1.0, self.n)

    def advance(self, state, rng=None):
        return step_diffusion(state, self.mu)

    def spec(self) -> str:
        return f"diffusion:{self.n},{self.mu!r}"


@dataclass(frozen=True)
class Random:
    count: int
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise InvalidArgument("random dynamics need count >= 1")

    @property
    def element_count(self) -> int:
        return self.count

    def initial(self, rank: int) -> np.ndarray:
        return np.zeros(self.count)

    def advance(self, state, rng):
        return rng.standard_normal(self.count)

    def spec(self) -> str:
        return f"random:{self.count},{self.seed}"


def parse_dynamics(text: str):
    """``linear:a,b;c,d`` | ``diffusion:n,mu`` | ``random:count,seed``."""
    kind, _, args = text.partition(":")
    try:
        if kind == "linear":
            rows = tuple(
                tuple(float(v) for v in row.split(",")) for row in args.split(";") if row.strip()
            )
            if not rows or any(len(r) != len(rows) for r in rows):
                raise InvalidArgument(f"linear matrix must be square: {args!r}")
            return Linear(rows)
        if kind == "diffusion":
            n, mu = args.split(",")
            return Diffusion(int(n), float(mu))
        if kind == "random":
            parts = args.split(",")
            return Random(int(parts[0]), int(parts[1]) if len(parts) > 1 else 0)
    except ValueError as exc:
        raise InvalidArgument(f"bad dynamics {text!r}: {exc}") from exc
    raise InvalidArgument(f"unknown dynamics {text!r}")


# -- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class IoMode:
    kind: str  # "broker" | "file" | "off"
    endpoints: tuple[EndpointAddress, ...] = ()
    directory: str | None = None

    @classmethod
    def parse(cls, text: str) -> "IoMode":
        kind, _, arg = text.partition(":")
        if kind == "broker":
            return cls("broker", endpoints=tuple(parse_endpoint_list(arg)))
        if kind == "file":
            if not arg:
                raise InvalidArgument("file io mode needs a directory")
            return cls("file", directory=arg)
        if kind in ("off", "disabled", "none"):
            return cls("off")
        raise InvalidArgument(f"unknown io mode {text!r}")

    def __str__(self):
        if self.kind == "broker":
            return "broker:" + ",".join(str(e) for e in self.endpoints)
        if self.kind == "file":
            return f"file:{self.directory}"
        return "off"


@dataclass
class SimConfig:
    world_size: int
    dynamics: object
    total_steps: int = 2000
    write_interval: int = 5
    step_compute_delay: float = 0.0
    io_mode: IoMode = field(default_factory=lambda: IoMode("off"))
    field_name: str = "pressure"
    queue_capacity: int = 64
    backpressure: str = "block"
    file_fsync: bool = True
    workers: str = "process"  # or "thread" for in-process test runs

    def __post_init__(self):
        if isinstance(self.dynamics, str):
            self.dynamics = parse_dynamics(self.dynamics)
        if isinstance(self.io_mode, str):
            self.io_mode = IoMode.parse(self.io_mode)
        if self.world_size < 1:
            raise InvalidArgument("world_size must be >= 1")
        if self.total_steps < 1:
            raise InvalidArgument("total_steps must be >= 1")
        if self.write_interval < 1:
            raise InvalidArgument("write_interval must be >= 1")
        if self.step_compute_delay < 0:
            raise InvalidArgument("step_compute_delay must be >= 0")
        if self.workers not in ("process", "thread"):
            raise InvalidArgument(f"unknown worker kind {self.workers!r}")
        if self.io_mode.kind == "broker" and len(self.io_mode.endpoints) > self.world_size:
            raise InvalidArgument("more endpoints than ranks")

    @property
    def emissions_per_rank(self) -> int:
        return self.total_steps // self.write_interval


@dataclass
class RankStats:
    rank: int
    stream_key: str
    records_emitted: int = 0
    records_dropped: int = 0
    bytes_emitted: int = 0
    start_ns: int = 0
    end_ns: int = 0
    error: str | None = None
    emissions: list = field(default_factory=list)  # (step, produced_at_ns)

    @property
    def elapsed_s(self) -> float:
        return (self.end_ns - self.start_ns) / 1e9


@dataclass
class GeneratorStats:
    io_mode: str
    world_size: int
    ranks: list[RankStats]

    @property
    def start_ns(self) -> int:
        return min(r.start_ns for r in self.ranks)

    @property
    def end_ns(self) -> int:
        return max(r.end_ns for r in self.ranks)

    @property
    def elapsed_s(self) -> float:
        return (self.end_ns - self.start_ns) / 1e9

    @property
    def records_emitted(self) -> int:
        return sum(r.records_emitted for r in self.ranks)

    @property
    def bytes_emitted(self) -> int:
        return sum(r.bytes_emitted for r in self.ranks)

    @property
    def failed_ranks(self) -> list[int]:
        return [r.rank for r in self.ranks if r.error]

    def emission_rows(self):
        for r in self.ranks:
            for step, produced in r.emissions:
                yield r.stream_key, step, produced

    def summary(self) -> dict:
        return {
            "io_mode": self.io_mode,
            "world_size": self.world_size,
            "start_ns": self.start_ns,
            "end_ns": self.end_ns,
            "elapsed_s": self.elapsed_s,
            "records_emitted": self.records_emitted,
            "bytes_emitted": self.bytes_emitted,
            "failed_ranks": self.failed_ranks,
            "ranks": [
                {k: v for k, v in asdict(r).items() if k != "emissions"} | {"elapsed_s": r.elapsed_s}
                for r in self.ranks
            ],
        }

    def write_logs(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "emissions.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stream_key", "step", "produced_at_ns"])
            w.writerows(self.emission_rows())
        with open(directory / "generator.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2)


# -- per-rank loop ----------------------------------------------------------


def _file_emitter(config: SimConfig, rank: int):
    root = Path(config.io_mode.directory) / f"rank-{rank}"
    root.mkdir(parents=True, exist_ok=True)
    index = open(root / "index.csv", "w", newline="")
    writer = csv.writer(index)
    writer.writerow(["step", "file", "produced_at_ns", "count"])

    def emit(step: int, state: np.ndarray, produced: int) -> int:
        name = f"{config.field_name}-{rank}-{step:08d}.bin"
        raw = state.astype("<f8").tobytes()
        with open(root / name, "wb") as fh:
            fh.write(raw)
            if config.file_fsync:
                fh.flush()
                os.fsync(fh.fileno())
        writer.writerow([step, name, produced, state.size])
        return len(raw)

    return emit, index.close


def run_rank(config: SimConfig, rank: int) -> RankStats:
    """Run one rank to completion. Never raises; failures land in ``error``."""
    from .broker import BrokerConfig, WriteOutcome, broker_init

    dyn = config.dynamics
    key = make_stream_key(config.field_name, rank)
    stats = RankStats(rank, key)
    rng = np.random.default_rng([getattr(dyn, "seed", 0), rank])
    stats.start_ns = time.monotonic_ns()
    ctx = None
    close = None
    try:
        if config.io_mode.kind == "broker":
            bcfg = BrokerConfig(
                list(config.io_mode.endpoints),
                queue_capacity=config.queue_capacity,
                backpressure=config.backpressure,
            )
            ctx = broker_init(bcfg, config.field_name, rank, config.world_size, dyn.element_count)
        elif config.io_mode.kind == "file":
            emit_file, close = _file_emitter(config, rank)

        state = dyn.initial(rank)
        delay = config.step_compute_delay
        for step in range(1, config.total_steps + 1):
            state = dyn.advance(state, rng)
            if delay:
                time.sleep(delay)
            if step % config.write_interval:
                continue
            if ctx is not None:
                outcome = ctx.write(step, state)
                if outcome is WriteOutcome.QUEUED:
                    stats.records_emitted += 1
                    stats.bytes_emitted += state.size * 8
                    stats.emissions.append((step, ctx.last_produced_at))
                else:
                    stats.records_dropped += 1
            elif close is not None:
                produced = time.monotonic_ns()
                stats.bytes_emitted += emit_file(step, state, produced)
                stats.records_emitted += 1
                stats.emissions.append((step, produced))
        if ctx is not None:
            ctx.finalize()
    except Exception as exc:  # reported per rank, not propagated
        log.error("rank %d failed: %s", rank, exc)
        stats.error = f"{type(exc).__name__}: {exc}"
    finally:
        if close is not None:
            close()
    stats.end_ns = time.monotonic_ns()
    return stats


def run_generator(config: SimConfig, log_dir=None) -> GeneratorStats:
    """Run all ranks concurrently and collect their stats."""
    if config.workers == "thread":
        pool = concurrent.futures.ThreadPoolExecutor(config.world_size)
    else:
        pool = concurrent.futures.ProcessPoolExecutor(
            config.world_size, mp_context=multiprocessing.get_context("spawn")
        )
    with pool:
        futures = [pool.submit(run_rank, config, rank) for rank in range(config.world_size)]
        ranks = []
        for rank, fut in enumerate(futures):
            try:
                ranks.append(fut.result())
            except Exception as exc:  # worker process died
                now = time.monotonic_ns()
                ranks.append(RankStats(rank, make_stream_key(config.field_name, rank),
                                       start_ns=now, end_ns=now, error=repr(exc)))
    stats = GeneratorStats(str(config.io_mode), config.world_size, ranks)
    if log_dir is not None:
        stats.write_logs(log_dir)
    return stats


def emission_counts(stats: GeneratorStats) -> dict[str, int]:
    return {r.stream_key: r.records_emitted for r in stats.ranks}


def describe(config: SimConfig) -> dict:
    return {
        "world_size": config.world_size,
        "dynamics": config.dynamics.spec(),
        "total_steps": config.total_steps,
        "write_interval": config.write_interval,
        "step_compute_delay": config.step_compute_delay,
        "io_mode": str(config.io_mode),
        "field_name": config.field_name,
    }
