import csv
import io
import json

import pytest

from oracles import MiB, nearest_rank, pipe_makespan_us
from scenarios import MODES
from sanvirt.bench import CSV_COLUMNS, compare, percentile, run
from sanvirt.config import from_dict
from sanvirt.errors import MismatchedWorkload

BW = 100 * MiB
HOPS = {"server_level": 2, "subsystem_level": 2, "asymmetric": 2,
        "symmetric": 4, "semi_symmetric": 4}


def pipe_config(mode, hosts=1, subs=1, total=64 * MiB, **extra):
    d = {"architecture": mode, "hosts": hosts,
         "subsystems": [{"capacity_blocks": 1 << 20} for _ in range(subs)],
         "links": {"latency_us": 100, "bandwidth_bytes_per_s": BW},
         "workload": {"pattern": "sequential_write", "io_size_blocks": 64,
                      "total_bytes": total, "queue_depth": 8},
         "seed": 1}
    d.update(extra)
    return from_dict(d)


@pytest.mark.parametrize("mode", MODES)
def test_single_stream_within_five_percent_of_pipe_bound(mode):
    rep = run(pipe_config(mode))
    bound = pipe_makespan_us(64 * MiB, 64 * 4096, BW, HOPS[mode], 100)
    assert abs(rep.makespan_us - bound) / bound <= 0.05


def test_server_level_single_stream_within_one_percent():
    rep = run(pipe_config("server_level"))
    bound = pipe_makespan_us(64 * MiB, 64 * 4096, BW, 2, 100)
    assert abs(rep.makespan_us - bound) / bound <= 0.01


def test_report_is_a_pure_function_of_config():
    cfg = pipe_config("semi_symmetric", hosts=2, subs=2, total=4 * MiB,
                      workload={"pattern": "mixed", "total_bytes": 4 * MiB},
                      migrations={"count": 3})
    a, b = run(cfg), run(cfg)
    assert a.to_json() == b.to_json()
    assert run(pipe_config("semi_symmetric", hosts=2, subs=2, total=4 * MiB,
                           workload={"pattern": "mixed", "total_bytes": 4 * MiB},
                           seed=2)).trace_hash != a.trace_hash


@pytest.mark.parametrize("mode", MODES)
def test_report_conservation_and_sanity(mode):
    cfg = pipe_config(mode, hosts=3, subs=2, total=2 * MiB,
                      workload={"pattern": "mixed", "total_bytes": 2 * MiB, "io_size_blocks": 5})
    rep = run(cfg)
    assert sum(h["bytes"] for h in rep.per_host) == rep.total_bytes == 3 * 2 * MiB
    assert all(h["failed"] == 0 for h in rep.per_host)
    assert rep.aggregate_throughput_bytes_per_s == pytest.approx(
        rep.total_bytes * 1e6 / rep.makespan_us)
    assert rep.latency_p50_us <= rep.latency_p95_us <= rep.latency_p99_us <= rep.makespan_us
    assert all(0 <= f <= 1 for f in rep.link_busy_fraction.values())
    assert rep.data_ios == 3 * -(-(2 * MiB // 4096) // 5)
    assert 0 < rep.pool_utilization <= 1


def test_percentile_nearest_rank():
    vals = [15, 20, 35, 40, 50]
    for p in (0, 5, 30, 40, 50, 99, 100):
        assert percentile(vals, p) == nearest_rank(vals, p)
    assert percentile([], 50) == 0


@pytest.fixture(scope="module")
def four_by_four():
    cfg = pipe_config("symmetric", hosts=4, subs=4, total=8 * MiB)
    return compare([cfg.with_architecture(m) for m in MODES])


def test_compare_five_rows(four_by_four):
    text, reports = four_by_four
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert [r["architecture"] for r in rows] == list(MODES)
    assert len(reports) == 5


def test_compare_bottleneck_column(four_by_four):
    rows = {r["architecture"]: r for r in csv.DictReader(io.StringIO(four_by_four[0]))}
    assert rows["symmetric"]["bottleneck"] == "a0"
    assert float(rows["symmetric"]["bottleneck_busy_fraction"]) >= 0.95
    for m in ("server_level", "subsystem_level", "asymmetric"):
        assert rows[m]["bottleneck"][0] in "hs"
    # two appliances serving four hosts: the appliance links are still the limit
    assert rows["semi_symmetric"]["bottleneck"] in ("a0", "a1")


def test_compare_accepts_finished_reports(four_by_four):
    _, reports = four_by_four
    text, again = compare(reports[:2])
    assert again == reports[:2]
    assert text.count("\n") == 3


def test_compare_rejects_mismatched_workload():
    a = pipe_config("symmetric", total=1 * MiB)
    with pytest.raises(MismatchedWorkload):
        compare([a, pipe_config("asymmetric", total=2 * MiB)])
    with pytest.raises(MismatchedWorkload):
        compare([a, pipe_config("asymmetric", total=1 * MiB, seed=9)])
    with pytest.raises(ValueError):
        compare([a])


def test_compare_parallel_matches_serial():
    cfgs = [pipe_config(m, total=1 * MiB) for m in ("symmetric", "asymmetric")]
    assert compare(cfgs, workers=2)[0] == compare(cfgs)[0]


def test_trace_file_hash_matches_report(tmp_path):
    import hashlib
    p = tmp_path / "t.jsonl"
    rep = run(pipe_config("asymmetric", total=1 * MiB), trace_path=str(p))
    raw = p.read_bytes()
    assert hashlib.sha256(raw).hexdigest() == rep.trace_hash
    first = json.loads(raw.splitlines()[0])
    assert set(first) == {"t_us", "src", "dst", "kind", "bytes"}
