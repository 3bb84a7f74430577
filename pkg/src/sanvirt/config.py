"""Scenario description: loading, validation and canonical JSON form.

A scenario is one JSON object.  Missing fields take defaults; every problem
found is reported at once through :class:`~sanvirt.errors.ValidationError`.
See ``docs/scenario.md`` for the schema.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

from .errors import ParseError, ValidationError
from .extent import DEFAULT_BLOCK_SIZE, DEFAULT_EXTENT_BLOCKS, Placement
from .fabric import DEFAULT_BANDWIDTH, DEFAULT_LATENCY_US, DEFAULT_MAX_EVENTS
from .subsystem import DEFAULT_INTERNAL_BANDWIDTH, DEFAULT_SERVICE_LATENCY_US

MODES = ("server_level", "subsystem_level", "symmetric", "asymmetric", "semi_symmetric")
PATTERNS = ("sequential_read", "sequential_write", "random_read", "random_write", "mixed")
POLICIES = ("thin", "full", "striped")
DEFAULT_APPLIANCES = {"symmetric": 1, "semi_symmetric": 2}


@dataclass
class SubsystemSpec:
    capacity_blocks: int
    service_latency_us: int = DEFAULT_SERVICE_LATENCY_US
    internal_bandwidth: int = DEFAULT_INTERNAL_BANDWIDTH


@dataclass
class LinkSpec:
    latency_us: int = DEFAULT_LATENCY_US
    bandwidth_bytes_per_s: int = DEFAULT_BANDWIDTH
    overrides: dict = field(default_factory=dict)


@dataclass
class VolumeSpec:
    size_blocks: Optional[int] = None
    policy: str = "thin"
    hosts: Optional[list] = None
    stripe_unit_blocks: Optional[int] = None
    stripe_devices: Optional[list] = None


@dataclass
class WorkloadSpec:
    # defaults stand in for OLTP-like traffic
    pattern: str = "mixed"
    io_size_blocks: int = 8
    total_bytes: int = 8 << 20
    queue_depth: int = 8
    think_time_us: int = 0
    read_fraction: float = 0.7


@dataclass
class MigrationSpec:
    count: int = 0


@dataclass
class ScenarioConfig:
    subsystems: list
    architecture: str
    hosts: int = 1
    links: LinkSpec = field(default_factory=LinkSpec)
    appliance_count: Optional[int] = None
    volumes: list = field(default_factory=list)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    migrations: MigrationSpec = field(default_factory=MigrationSpec)
    seed: int = 0
    block_size: int = DEFAULT_BLOCK_SIZE
    extent_size_blocks: int = DEFAULT_EXTENT_BLOCKS
    placement: str = Placement.ROUND_ROBIN.value
    file_backed_dir: Optional[str] = None
    max_events: int = DEFAULT_MAX_EVENTS

    @property
    def effective_appliance_count(self):
        if self.appliance_count is not None:
            return self.appliance_count
        return DEFAULT_APPLIANCES.get(self.architecture, 0)

    def with_architecture(self, architecture, appliance_count=None):
        """Same scenario under another method; appliance count reverts to that mode's default."""
        return replace(self, architecture=architecture, appliance_count=appliance_count)

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        """Canonical form: sorted keys, defaults spelled out."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def workload_key(self):
        return (self.hosts, asdict(self.workload), self.seed, self.block_size)


def _check_fields(cls, data, where, problems):
    known = {f.name for f in fields(cls)}
    for k in data:
        if k not in known:
            problems.append(f"{where}{k}: unknown field")
    return {k: v for k, v in data.items() if k in known}


def _sub(cls, data, where, problems):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        problems.append(f"{where.rstrip('.')}: expected an object")
        return cls()
    try:
        return cls(**_check_fields(cls, data, where, problems))
    except TypeError as exc:
        problems.append(f"{where.rstrip('.')}: {exc}")
        return cls()


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def from_dict(data):
    """Build and validate a ScenarioConfig from decoded JSON."""
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ValidationError(["scenario: expected a JSON object"])
    top = _check_fields(ScenarioConfig, data, "", problems)
    for req in ("subsystems", "architecture"):
        if req not in top:
            problems.append(f"{req}: required")
    subs = []
    raw_subs = top.get("subsystems", [])
    if not isinstance(raw_subs, list):
        problems.append("subsystems: expected a list")
        raw_subs = []
    for i, s in enumerate(raw_subs):
        if isinstance(s, dict) and "capacity_blocks" not in s:
            problems.append(f"subsystems[{i}].capacity_blocks: required")
            continue
        subs.append(_sub(SubsystemSpec, s, f"subsystems[{i}].", problems))
    vols = []
    raw_vols = top.get("volumes", [])
    if not isinstance(raw_vols, list):
        problems.append("volumes: expected a list")
        raw_vols = []
    for i, v in enumerate(raw_vols):
        vols.append(_sub(VolumeSpec, v, f"volumes[{i}].", problems))
    cfg = ScenarioConfig(
        subsystems=subs,
        architecture=top.get("architecture", ""),
        links=_sub(LinkSpec, top.get("links"), "links.", problems),
        volumes=vols,
        workload=_sub(WorkloadSpec, top.get("workload"), "workload.", problems),
        migrations=_sub(MigrationSpec, top.get("migrations"), "migrations.", problems),
        **{k: v for k, v in top.items()
           if k not in ("subsystems", "architecture", "links", "volumes", "workload",
                        "migrations")})
    problems.extend(validate(cfg))
    if problems:
        raise ValidationError(problems)
    return normalize(cfg)


def validate(cfg):
    """Return every violation found in ``cfg`` (empty when valid)."""
    p = []

    def positive(name, v):
        if not _is_int(v) or v < 1:
            p.append(f"{name}: must be an integer >= 1 (got {v!r})")

    if cfg.architecture not in MODES:
        p.append(f"architecture: must be one of {', '.join(MODES)} (got {cfg.architecture!r})")
    positive("hosts", cfg.hosts)
    if not cfg.subsystems:
        p.append("subsystems: at least one subsystem is required")
    for i, s in enumerate(cfg.subsystems):
        positive(f"subsystems[{i}].capacity_blocks", s.capacity_blocks)
        positive(f"subsystems[{i}].internal_bandwidth", s.internal_bandwidth)
        if not _is_int(s.service_latency_us) or s.service_latency_us < 0:
            p.append(f"subsystems[{i}].service_latency_us: must be an integer >= 0")
    positive("links.bandwidth_bytes_per_s", cfg.links.bandwidth_bytes_per_s)
    if not _is_int(cfg.links.latency_us) or cfg.links.latency_us < 0:
        p.append("links.latency_us: must be an integer >= 0")
    if not isinstance(cfg.links.overrides, dict):
        p.append("links.overrides: expected an object keyed by node id")
    else:
        for node, o in cfg.links.overrides.items():
            if not isinstance(o, dict) or set(o) - {"latency_us", "bandwidth_bytes_per_s"}:
                p.append(f"links.overrides.{node}: only latency_us and "
                         f"bandwidth_bytes_per_s may be overridden")
            elif "bandwidth_bytes_per_s" in o:
                positive(f"links.overrides.{node}.bandwidth_bytes_per_s",
                         o["bandwidth_bytes_per_s"])
    ac = cfg.appliance_count
    if ac is not None and (not _is_int(ac) or ac < 0):
        p.append(f"appliance_count: must be an integer >= 0 (got {ac!r})")
    elif cfg.architecture in ("symmetric", "semi_symmetric") and cfg.effective_appliance_count < 1:
        p.append(f"appliance_count: must be >= 1 when architecture is "
                 f"{cfg.architecture!r} (architecture/appliance_count conflict)")
    elif cfg.architecture == "symmetric" and cfg.effective_appliance_count > 1:
        p.append("appliance_count: the symmetric method has exactly one central unit "
                 "(architecture/appliance_count conflict)")
    positive("block_size", cfg.block_size)
    if _is_int(cfg.block_size) and cfg.block_size % 16:
        p.append("block_size: must be a multiple of 16 bytes (room for a write stamp)")
    positive("extent_size_blocks", cfg.extent_size_blocks)
    positive("max_events", cfg.max_events)
    if not _is_int(cfg.seed) or cfg.seed < 0:
        p.append("seed: must be a non-negative integer")
    if cfg.placement not in [m.value for m in Placement]:
        p.append(f"placement: must be round_robin or least_loaded (got {cfg.placement!r})")
    w = cfg.workload
    if w.pattern not in PATTERNS:
        p.append(f"workload.pattern: must be one of {', '.join(PATTERNS)}")
    positive("workload.io_size_blocks", w.io_size_blocks)
    positive("workload.total_bytes", w.total_bytes)
    if _is_int(w.total_bytes) and _is_int(cfg.block_size) and cfg.block_size > 0 \
            and w.total_bytes % cfg.block_size:
        p.append("workload.total_bytes: must be a whole number of blocks")
    positive("workload.queue_depth", w.queue_depth)
    if not _is_int(w.think_time_us) or w.think_time_us < 0:
        p.append("workload.think_time_us: must be an integer >= 0")
    if not isinstance(w.read_fraction, (int, float)) or not 0 <= w.read_fraction <= 1:
        p.append("workload.read_fraction: must lie in [0, 1]")
    if not _is_int(cfg.migrations.count) or cfg.migrations.count < 0:
        p.append("migrations.count: must be a non-negative integer")
    hosts = cfg.hosts if _is_int(cfg.hosts) and cfg.hosts > 0 else 0
    covered = set()
    for i, v in enumerate(cfg.volumes):
        if v.size_blocks is not None:
            positive(f"volumes[{i}].size_blocks", v.size_blocks)
        if v.policy not in POLICIES:
            p.append(f"volumes[{i}].policy: must be one of {', '.join(POLICIES)}")
        hs = v.hosts if v.hosts is not None else [i % max(hosts, 1)]
        if not isinstance(hs, list) or not hs or not all(_is_int(h) and 0 <= h < hosts
                                                         for h in hs):
            p.append(f"volumes[{i}].hosts: must list host indices in [0, {hosts})")
        else:
            covered.update(hs)
            if len(hs) > 1 and cfg.architecture in ("server_level", "asymmetric"):
                p.append(f"volumes[{i}].hosts: the {cfg.architecture} method cannot share "
                         f"a volume between hosts")
        if v.stripe_devices is not None and not all(
                _is_int(d) and 0 <= d < len(cfg.subsystems) for d in v.stripe_devices):
            p.append(f"volumes[{i}].stripe_devices: must list subsystem indices")
        if v.stripe_unit_blocks is not None:
            positive(f"volumes[{i}].stripe_unit_blocks", v.stripe_unit_blocks)
    if cfg.volumes and hosts and covered != set(range(hosts)):
        missing = sorted(set(range(hosts)) - covered)
        p.append(f"volumes: hosts {missing} have no volume to run the workload on")
    return p


def normalize(cfg):
    """Fill per-volume defaults so the canonical form is explicit."""
    bs = cfg.block_size
    auto = -(-cfg.workload.total_bytes // bs)
    auto = -(-auto // cfg.extent_size_blocks) * cfg.extent_size_blocks
    if not cfg.volumes:
        cfg.volumes = [VolumeSpec() for _ in range(cfg.hosts)]
    vols = []
    for i, v in enumerate(cfg.volumes):
        v = replace(v)
        if v.size_blocks is None:
            v.size_blocks = auto
        if v.hosts is None:
            v.hosts = [i % cfg.hosts]
        if v.policy == "striped":
            if v.stripe_devices is None:
                v.stripe_devices = list(range(len(cfg.subsystems)))
            if v.stripe_unit_blocks is None:
                v.stripe_unit_blocks = cfg.extent_size_blocks
        vols.append(v)
    cfg.volumes = vols
    return cfg


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}",
                         line=exc.lineno) from None
    return from_dict(data)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
