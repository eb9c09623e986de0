import csv
import io

import pytest

from qkdkem import LatencyModel
from qkdkem.bench import (
    BASELINE, CSV_COLUMNS, BenchConfig, BenchRecord, bench_handshake, bench_ops, emit, main,
)
from qkdkem.errors import EmptyRun, InvalidConfig


def recs(n, **kw):
    base = dict(suite="mock256", flow="client_initiated", api="etsi014", phase="keygen")
    base.update(kw)
    return [BenchRecord(iteration=i, duration_us=100.0 + i, **base) for i in range(n)]


def test_emit_csv_lines():
    text = emit(recs(3), "csv")
    lines = text.strip().split("\n")
    assert len(lines) == 4
    assert lines[0] == ",".join(CSV_COLUMNS)


def test_emit_empty():
    with pytest.raises(EmptyRun):
        emit([], "csv")


def test_emit_table_one_row_per_suite():
    records = (recs(4, suite="mock256", flow=BASELINE, api="none", phase="handshake")
               + recs(4, suite="mock256", phase="handshake")
               + recs(4, suite="other", flow=BASELINE, api="none", phase="handshake")
               + recs(4, suite="other", phase="handshake"))
    text = emit(records, "table")
    rows = [ln for ln in text.splitlines() if ln.startswith(("mock256", "other"))]
    assert len(rows) == 2
    for row in rows:
        nums = [float(x) for x in row.split("|", 1)[1].replace("|", " ").split()]
        assert len(nums) == 4


def test_emit_writes_file(tmp_path):
    out = tmp_path / "r.csv"
    emit(recs(2), "csv", str(out))
    assert out.read_text().count("\n") == 3


def test_config_validation():
    with pytest.raises(InvalidConfig):
        BenchConfig(iterations=0)
    with pytest.raises(InvalidConfig):
        BenchConfig(suites=[])


def test_server_004_combination_skipped():
    cfg = BenchConfig(flows=["server_initiated", "client_initiated"], apis=["etsi004"])
    assert [(s.flow.value, s.api.value) for s in cfg.hybrid_suites()] == [("client_initiated", "etsi004")]


def test_pure_ops_are_fast_and_counted():
    records, summary = bench_ops(BenchConfig(flows=[], iterations=50, warmup=2))
    for phase in ("keygen", "encaps", "decaps"):
        cell = summary[("mock256", BASELINE, "none", phase)]
        assert cell.n == 50
        assert cell.mean_ms < 1.0
    assert all(r.duration_us > 0 for r in records)


def test_record_counts_deterministic():
    cfg = BenchConfig(flows=["client_initiated", "server_initiated"], iterations=7, warmup=1)
    a, _ = bench_ops(cfg)
    b, _ = bench_ops(cfg)
    key = lambda r: (r.suite, r.flow, r.api, r.phase, r.iteration)  # noqa: E731
    assert sorted(map(key, a)) == sorted(map(key, b))
    assert len(a) == 3 * 7 * 3  # baseline + 2 flows, 3 phases each


def test_handshake_zero_latency_overhead_small():
    _, summary = bench_handshake(BenchConfig(iterations=30, warmup=3))
    base = summary[("mock256", BASELINE, "none", "handshake")].mean_ms
    hyb = summary[("mock256", "client_initiated", "etsi014", "handshake")].mean_ms
    assert hyb - base < 5.0


def test_additivity_and_monotonicity():
    means = {}
    for fixed in (50, 80):
        cfg = BenchConfig(iterations=5, warmup=1, latency=LatencyModel(fixed))
        _, ops = bench_ops(cfg)
        _, hs = bench_handshake(cfg)
        for phase, calls in (("keygen", 1), ("encaps", 1), ("decaps", 0)):
            delta = (ops[("mock256", "client_initiated", "etsi014", phase)].mean_ms
                     - ops[("mock256", BASELINE, "none", phase)].mean_ms)
            if calls:
                assert abs(delta - calls * fixed) <= 0.2 * calls * fixed
            else:
                assert delta < 10
        means[fixed] = (hs[("mock256", "client_initiated", "etsi014", "handshake")].mean_ms,
                        hs[("mock256", BASELINE, "none", "handshake")].mean_ms)
    assert means[80][0] > means[50][0]
    assert abs(means[80][1] - means[50][1]) < 5.0


def test_cli_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    rc = main(["--iterations", "4", "--warmup", "0", "--flow", "client", "--flow", "server",
               "--api", "etsi014", "--format", "csv", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert set(rows[0]) == set(CSV_COLUMNS)
    # ops: (baseline + 2 flows) x 3 phases; handshake: baseline + 2 flows
    assert len(rows) == 4 * (9 + 3)


def test_cli_table_stdout(capsys):
    assert main(["--iterations", "2", "--warmup", "0", "--mode", "handshake", "--api", "etsi004"]) == 0
    out = capsys.readouterr().out
    assert "handshake: plain vs client_initiated/etsi004" in out


def test_cli_bad_suite_exits_nonzero(capsys):
    assert main(["--suite", "nosuchkem", "--iterations", "1"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_spawn_mode(capsys):
    assert main(["--iterations", "3", "--warmup", "0", "--kme", "spawn", "--mode", "handshake",
                 "--format", "csv"]) == 0
    assert capsys.readouterr().out.count("\n") == 1 + 3 + 3


def test_parallel_handshakes():
    _, summary = bench_handshake(BenchConfig(iterations=12, warmup=0, parallel=4,
                                             latency=LatencyModel(10)))
    assert summary[("mock256", "client_initiated", "etsi014", "handshake")].n == 12
