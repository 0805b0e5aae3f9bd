import csv
import json
from pathlib import Path

import numpy as np
import pytest

from streambridge.bench import (
    EXIT_VALIDATION,
    ConfigError,
    ReconciliationError,
    WorkflowConfig,
    emit_report,
    measure_latency,
    reconcile,
    run_workflow,
    scaling_report,
)
from streambridge.endpoint import StreamStore
from streambridge.engine import TIMESTAMP_COLUMNS, EngineConfig, StreamEngine
from streambridge.sim import Diffusion, Linear, step_diffusion, step_linear

DATA = Path(__file__).parent / "data"

BASE = {
    "endpoints": ["127.0.0.1:7001", "127.0.0.1:7002"],
    "generator": {"ranks": 8, "dynamics": "random:16,1", "steps": 20},
    "engine": {"trigger_ms": 500},
}


def cfg(**over):
    data = json.loads(json.dumps(BASE))
    for k, v in over.items():
        if isinstance(v, dict):
            data[k] = {**data.get(k, {}), **v}
        else:
            data[k] = v
    return data


def test_config_defaults_and_ratio():
    c = WorkflowConfig.from_dict(cfg(), environ={})
    assert c.ratio == "8:2:8" and c.element_count == 16
    assert c.generator.interval == 5 and c.engine.window == 16


@pytest.mark.parametrize("over", [
    {"engine": {"endpoints": ["127.0.0.1:7001"]}},
    {"endpoints": ["127.0.0.1:7001", "127.0.0.1:7001"]},
    {"generator": {"ranks": 1}},
    {"generator": {"dynamics": "wave:1"}},
    {"generator": {"backpressure": "maybe"}},
    {"engine": {"trigger_ms": 0}},
    {"engine": {"analyzer": "spark"}},
    {"engine": {"bogus": 1}},
])
def test_config_rejections(over):
    with pytest.raises(ConfigError):
        WorkflowConfig.from_dict(cfg(**over), environ={})


def test_engine_endpoints_may_match():
    c = WorkflowConfig.from_dict(cfg(engine={"endpoints": BASE["endpoints"]}), environ={})
    assert len(c.endpoints) == 2


def test_env_override_of_endpoints():
    c = WorkflowConfig.from_dict(cfg(), environ={"BROKER_ENDPOINTS": "127.0.0.1:9000"})
    assert [str(e) for e in c.endpoints] == ["127.0.0.1:9000"]


def test_mismatched_config_fails_before_spawn(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg(engine={"endpoints": ["10.9.9.9:1"]})))
    status, out = run_workflow(path)
    assert status == EXIT_VALIDATION and out is None
    assert list(tmp_path.iterdir()) == [path]


def test_latency_single_record():
    lat = measure_latency([("p:0", 5, 1_000_000_000)], [("p:0", 5, 4_100_000_000)])
    assert lat.p50 == pytest.approx(3.1, abs=1e-12)
    assert lat.count == 1


def test_latency_percentiles():
    em = [("p:0", s, 0) for s in range(1, 101)]
    co = [("p:0", s, s * 10_000_000) for s in range(1, 101)]
    lat = measure_latency(em, co)
    assert lat.max == pytest.approx(1.0)
    assert lat.p50 == pytest.approx(np.percentile(np.arange(1, 101) / 100, 50))


def test_latency_rejects_unknown_records():
    with pytest.raises(ReconciliationError) as err:
        measure_latency([("p:0", 5, 0)], [("p:0", 5, 1), ("p:1", 5, 1), ("p:0", 10, 1)])
    assert err.value.offenders == [("p:1", 5), ("p:0", 10)]


def test_reconcile_counts():
    em = [("p:0", 1, 0), ("p:0", 2, 0), ("p:1", 1, 0)]
    ok = reconcile(em, [(k, s, 9) for k, s, _ in em], {"p:0": 2, "p:1": 1})
    assert ok["totals"] == {"emitted": 3, "stored": 3, "analyzed": 3, "lost": 0, "duplicated": 0,
                            "conserved": True}
    bad = reconcile(em, [("p:0", 2, 9), ("p:0", 1, 9), ("p:0", 1, 9)], {"p:0": 2, "p:1": 1})
    t = bad["totals"]
    assert (t["lost"], t["duplicated"], t["conserved"]) == (1, 1, False)
    assert bad["streams"]["p:0"]["steps_increasing"] is False


def tiny_run_rows():
    """Seeded in-process run over a store: linear and diffusion streams."""
    store = StreamStore()
    lin = Linear(((0.9, 0.0), (0.0, 0.5)))
    dif = Diffusion(3, 0.1)
    streams = {"field:0": (lin.initial(0), lambda u: step_linear(u, lin.matrix)),
               "field:1": (dif.initial(1), lambda u: step_diffusion(u, 0.1))}
    for key, (u, _) in streams.items():
        store.register(key, u.size)
    eng = StreamEngine(EngineConfig([], window=6), sources=[store])
    state = {k: u for k, (u, _) in streams.items()}
    step = 0
    for burst in (1, 3, 4, 2):
        for _ in range(burst):
            step += 1
            for key, (_, advance) in streams.items():
                state[key] = advance(state[key])
                store.append(key, step, state[key], produced_at=step)
        eng.cycle()
    return eng.rows


def strip_timestamps(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMESTAMP_COLUMNS]
    return [[r[i] for i in keep] for r in rows]


def test_golden_report_excluding_timestamps(tmp_path):
    rows = tiny_run_rows()
    emit_report(rows, {"note": "tiny"}, tmp_path)
    assert strip_timestamps(tmp_path / "report.csv") == strip_timestamps(DATA / "golden_report.csv")
    assert json.loads((tmp_path / "metrics.json").read_text()) == {"note": "tiny"}


def test_golden_rows_are_sensible():
    rows = [r for r in tiny_run_rows() if r.stream_key == "field:0" and r.status == "ok"]
    for r in rows:
        assert sorted(abs(z) for z in r.eigenvalues) == pytest.approx([0.5, 0.9], abs=1e-8)


def test_emit_report_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], {}, tmp_path)


def test_sixteen_panel_stability_plot(tmp_path):
    from streambridge.engine import AnalysisReportRow

    rows = []
    for r in range(16):
        for seq in range(3):
            rows.append(AnalysisReportRow(f"pressure:{r}", seq, seq + 1, seq + 1, 1, 1, seq + 1,
                                          seq + 1, "ok", 0.01 * r + 0.001 * seq, (1 + 0j,), 0, 0, 0, 0))
    paths = emit_report(rows, {}, tmp_path)
    svg = paths["stability"].read_text()
    assert paths["stability"].stat().st_size > 10_000
    assert svg.count('id="axes_') == 16


def test_scaling_report(tmp_path):
    dirs = []
    for p, rate in ((4, 100.0), (8, 195.0)):
        d = tmp_path / f"p{p}"
        d.mkdir()
        (d / "metrics.json").write_text(json.dumps({
            "ranks": p, "endpoints": max(1, p // 4), "parallelism": p, "lag_s": 1.0,
            "throughput": {"records_per_s": rate, "bytes_per_s": rate * 8},
            "latency_s": {"p50": 0.5, "p95": 1.0, "max": 1.5},
        }))
        dirs.append(d)
    out = scaling_report(dirs[::-1], tmp_path / "scale")
    lines = out["csv"].read_text().splitlines()
    assert [ln.split(",")[1] for ln in lines[1:]] == ["4", "8"]
    assert out["plot"].stat().st_size > 0


def _run_config(name, tmp_path, **gen):
    from conftest import free_port

    data = json.loads((Path(__file__).parent.parent / "configs" / name).read_text())
    data["endpoints"] = [f"127.0.0.1:{free_port()}" for _ in data["endpoints"]]
    data["generator"].update(gen)
    status, out = run_workflow(WorkflowConfig.from_dict(data, environ={}), tmp_path)
    return status, out


@pytest.mark.slow
def test_sixteen_to_one_ratio_run(tmp_path):
    status, out = _run_config("ratio-16.json", tmp_path)
    assert status == 0
    with open(out / "report.csv", newline="") as fh:
        keys = {r["stream_key"] for r in csv.DictReader(fh)}
    assert keys == {f"pressure:{r}" for r in range(16)}
    assert (out / "stability.svg").read_text().count('id="axes_') == 16
    manifest = json.loads((out / "MANIFEST.json").read_text())
    assert manifest["status"] == "ok" and manifest["ratio"] == "16:1:16"


@pytest.mark.slow
def test_identical_runs_are_deterministic(tmp_path):
    def fingerprint(out):
        with open(out / "emissions.csv", newline="") as fh:
            em = sorted((r["stream_key"], int(r["step"])) for r in csv.DictReader(fh))
        m = json.loads((out / "metrics.json").read_text())
        return em, {k: s["analyzed"] for k, s in m["streams"].items()}

    runs = [_run_config("smoke.json", tmp_path / f"r{i}", steps=50) for i in range(2)]
    assert [s for s, _ in runs] == [0, 0]
    assert fingerprint(runs[0][1]) == fingerprint(runs[1][1])
    assert len(fingerprint(runs[0][1])[0]) == 8 * 10
