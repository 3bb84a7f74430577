"""Run a scenario end to end and reduce it to a report.

:func:`run` builds the wiring, creates and opens the volumes, lets the
control plane settle, then starts every host's request stream at the same
instant and simulates until nothing is left to do.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import wire
from .architectures import ArchitectureMode, build, host_id
from .errors import MismatchedWorkload
from .fabric import Trace
from .workload import generate_workload

MIGRATING_MODES = (ArchitectureMode.SYMMETRIC, ArchitectureMode.ASYMMETRIC,
                   ArchitectureMode.SEMI_SYMMETRIC)


def percentile(values, p):
    """Nearest-rank percentile of an unsorted sequence."""
    if not len(values):
        return 0
    s = sorted(values)
    rank = max(1, math.ceil(p / 100 * len(s)))
    return s[rank - 1]


@dataclass
class HostResult:
    host: str
    volume_id: int
    ops: int
    failed: int
    bytes: int
    read_bytes: int
    write_bytes: int
    makespan_us: int
    throughput_bytes_per_s: float


@dataclass
class RunReport:
    architecture: str
    appliance_count: int
    hosts: int
    seed: int
    per_host: list
    total_bytes: int
    makespan_us: int
    aggregate_throughput_bytes_per_s: float
    latency_p50_us: int
    latency_p95_us: int
    latency_p99_us: int
    link_busy_fraction: dict
    node_bytes: dict
    bottleneck: str
    control_messages: int
    data_ios: int
    control_messages_per_io: float
    pool_utilization: float
    stale_epochs: int
    re_resolves: int
    io_failed: int
    migrations_requested: int
    migrations_done: int
    events: int
    trace_hash: str
    workload_key: str = field(default="", repr=False)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


class HostRunner:
    """Keeps up to ``queue_depth`` requests of one host's stream outstanding."""

    def __init__(self, wiring, host, volume_id, items, spec):
        self.wiring = wiring
        self.sim = wiring.sim
        self.host = host_id(host)
        self.driver = wiring.drivers[self.host]
        self.handle = self.driver.handles[volume_id]
        self.volume_id = volume_id
        self.items = items
        self.spec = spec
        self.block_size = wiring.config.block_size
        self.next = 0
        self.completions = []
        self.listeners = []

    def start(self):
        for _ in range(min(self.spec.queue_depth, len(self.items))):
            self._issue()

    def _issue(self):
        item = self.items[self.next]
        self.next += 1
        self.driver.submit_io(self.handle, item.request(self.volume_id, self.block_size),
                              lambda c, item=item: self._done(item, c))

    def _done(self, item, c):
        self.completions.append((item, c))
        for fn in self.listeners:
            fn(self, item, c)
        if self.next < len(self.items):
            if self.spec.think_time_us:
                self.sim.schedule(self.spec.think_time_us, self._issue)
            else:
                self._issue()

    @property
    def finished(self):
        return len(self.completions) == len(self.items)


@dataclass
class Session:
    """A built scenario with its volumes open and streams ready, before running."""
    config: object
    wiring: object
    runners: list
    volumes: list
    t0: int = 0
    migration_points: list = field(default_factory=list)
    migrations_requested: int = 0


def _host_volume(cfg, volumes, h):
    for vid, spec in zip(volumes, cfg.volumes):
        if h in spec.hosts:
            return vid, spec
    raise ValueError(f"host {h} has no volume")


def prepare(config, trace=None, audit=False):
    """Build, create and open volumes, settle the control plane, generate streams."""
    cfg = config
    w = build(cfg, trace=trace, audit=audit)
    volumes = []
    for v in cfg.volumes:
        volumes.append(w.create_volume(v.size_blocks, v.policy, v.hosts, v.stripe_unit_blocks,
                                       v.stripe_devices))
    for vid, v in zip(volumes, cfg.volumes):
        for h in v.hosts:
            w.open_volume(h, vid)
    w.settle()
    runners = []
    for h in range(cfg.hosts):
        vid, v = _host_volume(cfg, volumes, h)
        items = generate_workload(cfg.workload, cfg.seed, h, v.size_blocks, cfg.block_size)
        runners.append(HostRunner(w, h, vid, items, cfg.workload))
    s = Session(cfg, w, runners, volumes, w.sim.now)
    if cfg.migrations.count and w.mode in MIGRATING_MODES:
        _plan_migrations(s)
    return s


def _plan_migrations(s):
    """Stratified random trigger points over the middle 80% of completed operations."""
    total = sum(len(r.items) for r in s.runners)
    count = s.config.migrations.count
    rng = np.random.default_rng([s.config.seed, 0x316])
    lo, width = total // 10, max(1, (total * 8 // 10) // count)
    points = sorted(lo + k * width + int(rng.integers(width)) for k in range(count))
    targets = [int(v) for v in rng.choice(s.volumes, size=count)]
    s.migration_points = list(zip(points, targets))
    done = [0]

    def on_completion(runner, item, c):
        done[0] += 1
        while s.migration_points and s.migration_points[0][0] <= done[0]:
            _, vid = s.migration_points.pop(0)
            s.migrations_requested += 1
            s.wiring.migrate(vid)

    for r in s.runners:
        r.listeners.append(on_completion)


def execute(s):
    s.t0 = s.wiring.sim.now
    for r in s.runners:
        r.start()
    s.wiring.sim.run_until_idle()
    return s


def report(s):
    cfg, w = s.config, s.wiring
    bs = cfg.block_size
    per_host, latencies = [], []
    end = s.t0
    for r in s.runners:
        ok = [(it, c) for it, c in r.completions if c.ok]
        rb = sum(it.length * bs for it, _ in ok if it.op == wire.READ)
        wb = sum(it.length * bs for it, _ in ok if it.op == wire.WRITE)
        last = max((c.completed_at for _, c in r.completions), default=s.t0)
        end = max(end, last)
        span = last - s.t0
        latencies.extend(c.latency_us for _, c in r.completions)
        per_host.append(HostResult(r.host, r.volume_id, len(r.completions),
                                   len(r.completions) - len(ok), rb + wb, rb, wb, span,
                                   (rb + wb) * 1e6 / span if span else 0.0))
    makespan = end - s.t0
    total = sum(h.bytes for h in per_host)
    horizon = w.sim.now
    busy = {node: link.busy_fraction(horizon) for node, link in sorted(w.fabric.links.items())}
    bottleneck = max(sorted(busy), key=lambda n: busy[n]) if busy else ""
    control = sum(n for k, n in w.fabric.kind_counts.items() if k in wire.CONTROL_KINDS)
    data_ios = len(latencies)
    stores = w.stores()
    cap = sum(st.capacity_extents for st in stores)
    alloc = sum(st.allocated_extents for st in stores)
    stats = [d.stats for d in w.drivers.values()]
    return RunReport(
        architecture=w.mode.value,
        appliance_count=len(w.appliances),
        hosts=cfg.hosts,
        seed=cfg.seed,
        per_host=[asdict(h) for h in per_host],
        total_bytes=total,
        makespan_us=makespan,
        aggregate_throughput_bytes_per_s=total * 1e6 / makespan if makespan else 0.0,
        latency_p50_us=percentile(latencies, 50),
        latency_p95_us=percentile(latencies, 95),
        latency_p99_us=percentile(latencies, 99),
        link_busy_fraction=busy,
        node_bytes={node: link.bytes for node, link in sorted(w.fabric.links.items())},
        bottleneck=bottleneck,
        control_messages=control,
        data_ios=data_ios,
        control_messages_per_io=control / data_ios if data_ios else 0.0,
        pool_utilization=alloc / cap if cap else 0.0,
        stale_epochs=sum(st.stale_epochs for st in stats),
        re_resolves=sum(st.re_resolves for st in stats),
        io_failed=sum(st.io_failed for st in stats),
        migrations_requested=s.migrations_requested,
        migrations_done=w.migrations_done,
        events=w.sim.events_processed,
        trace_hash=w.sim.trace.hexdigest(),
        workload_key=workload_key(cfg),
    )


def workload_key(cfg):
    vols = [(v.size_blocks, v.hosts) for v in cfg.volumes]
    return json.dumps([cfg.hosts, asdict(cfg.workload), cfg.seed, cfg.block_size, vols],
                      sort_keys=True)


def run(config, trace_path=None, keep_trace=False):
    """Simulate ``config`` to completion and return its RunReport."""
    trace = Trace(trace_path, keep=keep_trace)
    try:
        s = execute(prepare(config, trace=trace))
        return report(s)
    finally:
        trace.close()


simulate = run

CSV_COLUMNS = ("architecture", "appliance_count", "hosts", "total_bytes", "makespan_us",
               "aggregate_throughput_bytes_per_s", "latency_p50_us", "latency_p95_us",
               "latency_p99_us", "bottleneck", "bottleneck_busy_fraction",
               "control_messages_per_io", "pool_utilization", "stale_epochs",
               "migrations_done", "trace_hash")


def _row(rep):
    d = rep.to_dict()
    d["bottleneck_busy_fraction"] = rep.link_busy_fraction.get(rep.bottleneck, 0.0)
    return [d[c] for c in CSV_COLUMNS]


def compare(items, workers=1):
    """One CSV row per run; every run must carry the same workload.

    ``items`` may mix ScenarioConfigs (run here, optionally in parallel
    worker processes) and finished RunReports.
    """
    items = list(items)
    if len(items) < 2:
        raise ValueError("compare needs at least two runs")
    keys = {it.workload_key if isinstance(it, RunReport) else workload_key(it)
            for it in items}
    if len(keys) != 1:
        raise MismatchedWorkload("runs differ in hosts, workload, seed, block size or volumes")
    todo = [it for it in items if not isinstance(it, RunReport)]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = iter(list(pool.map(run, todo)))
    else:
        done = iter([run(c) for c in todo])
    reports = [it if isinstance(it, RunReport) else next(done) for it in items]
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(CSV_COLUMNS)
    for rep in reports:
        out.writerow(_row(rep))
    return buf.getvalue(), reports
