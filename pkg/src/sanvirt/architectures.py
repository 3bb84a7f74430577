"""Wiring factory for the five virtualization methods.

:func:`build` turns a ScenarioConfig into a running set of nodes on one
simulated fabric.  Node ids: hosts ``h0..``, subsystems ``s0..``, appliances
``a0..`` and the metadata center ``mdc``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .appliance import Appliance, ApplianceMode
from .driver import VolumeDriver, VolumeInfo
from .errors import InvalidConfig, Unauthorized, UnknownVolume
from .extent import Placement, StripeLayout
from .fabric import Fabric, Simulator, Trace
from .metadata import STRIPED, MetadataCenter, MetadataStore
from .subsystem import FileBlockStore, MemoryBlockStore, Subsystem, SubsystemNode
from .workload import decode_stamps


class ArchitectureMode(str, Enum):
    SERVER_LEVEL = "server_level"
    SUBSYSTEM_LEVEL = "subsystem_level"
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"
    SEMI_SYMMETRIC = "semi_symmetric"


MDC = "mdc"


def host_id(i):
    return f"h{i}"


def subsystem_id(i):
    return f"s{i}"


def appliance_id(i):
    return f"a{i}"


@dataclass
class Route:
    """Where a host sends path resolutions and data for a volume."""
    control_target: Optional[str]
    data_target: Optional[str]


@dataclass
class Wiring:
    mode: ArchitectureMode
    config: object
    sim: Simulator
    fabric: Fabric
    subsystems: dict
    nodes: dict
    drivers: dict
    appliances: dict = field(default_factory=dict)
    mdc: Optional[MetadataCenter] = None
    host_stores: dict = field(default_factory=dict)
    controllers: dict = field(default_factory=dict)
    volume_hosts: dict = field(default_factory=dict)
    volume_home: dict = field(default_factory=dict)
    write_log: Optional[list] = None
    resolution_log: Optional[list] = None

    # -- routing --------------------------------------------------------------

    def appliance_for(self, volume_id):
        n = len(self.appliances)
        return appliance_id(volume_id % n) if n else None

    def route(self, volume_id):
        m = self.mode
        if m is ArchitectureMode.SERVER_LEVEL:
            return Route(None, None)
        if m is ArchitectureMode.SUBSYSTEM_LEVEL:
            return Route(None, self.volume_home[volume_id])
        if m is ArchitectureMode.SYMMETRIC:
            return Route(appliance_id(0), appliance_id(0))
        if m is ArchitectureMode.ASYMMETRIC:
            return Route(MDC, None)
        return Route(MDC, self.appliance_for(volume_id))

    def store_for(self, volume_id):
        """The metadata store holding the authoritative table of a volume."""
        m = self.mode
        if m is ArchitectureMode.SERVER_LEVEL:
            store = self.host_stores.get(self.volume_home.get(volume_id))
        elif m is ArchitectureMode.SUBSYSTEM_LEVEL:
            store = self.controllers.get(self.volume_home.get(volume_id))
        elif m is ArchitectureMode.SYMMETRIC:
            store = self.appliances[appliance_id(0)].store
        else:
            store = self.mdc.store
        if store is None or volume_id not in store.tables:
            raise UnknownVolume(f"no volume {volume_id}")
        return store

    def stores(self):
        m = self.mode
        if m is ArchitectureMode.SERVER_LEVEL:
            return list(self.host_stores.values())
        if m is ArchitectureMode.SUBSYSTEM_LEVEL:
            return list(self.controllers.values())
        if m is ArchitectureMode.SYMMETRIC:
            return [self.appliances[appliance_id(0)].store]
        return [self.mdc.store]

    def authoritative_table(self, volume_id):
        return self.store_for(volume_id).table(volume_id)

    def catalog(self, host, volume_id):
        """What ``host`` learns when it opens ``volume_id`` (setup-time discovery)."""
        store = self.store_for(volume_id)
        if not store.is_authorized(volume_id, host):
            raise Unauthorized(f"{host} may not open volume {volume_id}")
        t = store.table(volume_id)
        return VolumeInfo(volume_id, t.size_blocks, t.extent_size_blocks, t.epoch,
                          self.route(volume_id).data_target)

    # -- volumes ----------------------------------------------------------------

    def create_volume(self, size_blocks, policy="thin", hosts=(0,), stripe_unit_blocks=None,
                      stripe_devices=None, volume_id=None):
        """Create a volume for host indices ``hosts``; returns its id."""
        hosts = [host_id(h) for h in hosts]
        if not hosts:
            raise InvalidConfig("a volume needs at least one host")
        m = self.mode
        if len(hosts) > 1 and m in (ArchitectureMode.SERVER_LEVEL, ArchitectureMode.ASYMMETRIC):
            raise InvalidConfig(f"the {m.value} method cannot share a volume between hosts")
        if volume_id is None:
            volume_id = max(self.volume_hosts, default=-1) + 1
        if volume_id in self.volume_hosts:
            raise InvalidConfig(f"volume {volume_id} already exists")
        layout = None
        if policy == STRIPED:
            devs = stripe_devices if stripe_devices is not None else range(len(self.subsystems))
            unit = stripe_unit_blocks or self.config.extent_size_blocks
            layout = StripeLayout(tuple(subsystem_id(d) for d in devs), unit)
        # zoning callbacks look the holders up while the volume is being created
        self.volume_hosts[volume_id] = hosts
        try:
            if m is ArchitectureMode.SERVER_LEVEL:
                store = self.host_stores[hosts[0]]
                store.create_virtual_volume("default", size_blocks, policy, layout, volume_id, hosts)
                self.volume_home[volume_id] = hosts[0]
            elif m is ArchitectureMode.SUBSYSTEM_LEVEL:
                home = self._pick_home(size_blocks, layout)
                self.controllers[home].create_virtual_volume("default", size_blocks, policy, layout,
                                                             volume_id, hosts)
                self.volume_home[volume_id] = home
            elif m is ArchitectureMode.SYMMETRIC:
                self.appliances[appliance_id(0)].store.create_virtual_volume(
                    "default", size_blocks, policy, layout, volume_id, hosts)
            else:
                self.mdc.store.create_virtual_volume("default", size_blocks, policy, layout,
                                                     volume_id)
                for h in hosts:
                    self.mdc.authorize_and_publish(volume_id, h)
        except Exception:
            del self.volume_hosts[volume_id]
            raise
        return volume_id

    def _pick_home(self, size_blocks, layout):
        caps = {sid: s.capacity_blocks for sid, s in self.subsystems.items()}
        biggest = max(caps.values())
        if size_blocks > biggest:
            raise InvalidConfig(f"a {size_blocks}-block volume exceeds the largest subsystem "
                                f"({biggest} blocks); subsystem-level volumes cannot span "
                                f"subsystems")
        if layout is not None:
            if layout.device_count != 1:
                raise InvalidConfig("subsystem-level volumes cannot be striped across "
                                    "subsystems")
            return layout.device_ids[0]
        # spread volumes: fewest hosted first, then most free space, then lowest index
        fits = [sid for sid in caps if caps[sid] >= size_blocks]
        return min(fits, key=lambda sid: (len(self.controllers[sid].tables),
                                          -self.controllers[sid].free_extents,
                                          list(caps).index(sid)))

    def open_volume(self, host, volume_id):
        return self.drivers[host_id(host) if isinstance(host, int) else host].open_volume(
            volume_id)

    # -- migration --------------------------------------------------------------

    def migrate(self, volume_id, extent_index=None, new_loc=None):
        """Queue an online remap of one extent (a random mapped one by default)."""
        m = self.mode
        if m is ArchitectureMode.SYMMETRIC:
            self.appliances[appliance_id(0)].request_migration(volume_id, extent_index,
                                                               new_loc)
        elif m in (ArchitectureMode.ASYMMETRIC, ArchitectureMode.SEMI_SYMMETRIC):
            self.mdc.request_migration(volume_id, extent_index, new_loc)
        else:
            raise InvalidConfig(f"the {m.value} method has no online extent migration")

    @property
    def migrations_done(self):
        if self.mdc is not None:
            return self.mdc.migrations_done
        return sum(a.migrations_done for a in self.appliances.values())

    @property
    def migrations_skipped(self):
        if self.mdc is not None:
            return self.mdc.migrations_skipped
        return sum(a.migrations_skipped for a in self.appliances.values())

    # -- inspection -------------------------------------------------------------

    def read_volume(self, volume_id):
        """Current volume contents, read straight off the devices via the authoritative map."""
        table = self.authoritative_table(volume_id)
        bs = self.config.block_size
        e = table.extent_size_blocks
        parts = []
        for idx in range(table.n_extents):
            n = table.extent_length(idx)
            loc = table.locations[idx]
            if loc is None:
                parts.append(bytes(n * bs))
            else:
                parts.append(self.subsystems[loc.subsystem_id].read_blocks(loc.device_lba, n))
        data = b"".join(parts)
        assert len(data) == table.size_blocks * bs, (len(data), e)
        return data

    def settle(self):
        return self.sim.run_until_idle()


def _block_store(cfg, sid):
    if cfg.file_backed_dir:
        os.makedirs(cfg.file_backed_dir, exist_ok=True)
        return FileBlockStore(os.path.join(cfg.file_backed_dir, f"{sid}.img"), cfg.block_size)
    return MemoryBlockStore(cfg.block_size)


def build(config, trace=None, audit=False):
    """Construct every node, link, ACL and route of ``config.architecture``.

    With ``audit`` the wiring records each host-originated device write
    (decoded stamps, in apply order) in ``write_log`` and each appliance
    resolution in ``resolution_log``.
    """
    cfg = config
    try:
        mode = ArchitectureMode(cfg.architecture)
    except ValueError:
        raise InvalidConfig(f"unknown architecture {cfg.architecture!r}") from None
    n_app = cfg.effective_appliance_count
    if mode is ArchitectureMode.SEMI_SYMMETRIC and n_app < 1:
        raise InvalidConfig("the semi-symmetric method needs at least one appliance")
    if mode is ArchitectureMode.SYMMETRIC and n_app != 1:
        raise InvalidConfig("the symmetric method has exactly one central appliance")
    sim = Simulator(cfg.max_events, trace if trace is not None else Trace())
    fabric = Fabric(sim, cfg.links.latency_us, cfg.links.bandwidth_bytes_per_s,
                    cfg.links.overrides)
    placement = Placement(cfg.placement)
    esz = cfg.extent_size_blocks
    rng = np.random.default_rng([cfg.seed, 0x5A17])
    write_log = [] if audit else None
    resolution_log = [] if audit else None

    subsystems = {}
    for i, spec in enumerate(cfg.subsystems):
        sid = subsystem_id(i)
        sub = Subsystem(sid, spec.capacity_blocks, spec.service_latency_us,
                        spec.internal_bandwidth, cfg.block_size, _block_store(cfg, sid))
        if audit:
            sub.on_write = _audit_hook(sim, write_log, cfg.block_size)
        subsystems[sid] = sub
    hosts = [host_id(i) for i in range(cfg.hosts)]

    w = Wiring(mode, cfg, sim, fabric, subsystems, {}, {}, write_log=write_log,
               resolution_log=resolution_log)

    # data-path nodes first so attach order (and hence the trace) is stable
    shim = mode is ArchitectureMode.ASYMMETRIC
    for sid, sub in subsystems.items():
        ctl = None
        if mode is ArchitectureMode.SUBSYSTEM_LEVEL:
            ctl = MetadataStore(esz, placement)
            ctl.register_subsystem(sid, sub.capacity_blocks)
            w.controllers[sid] = ctl
            sub.set_acl(0, sub.capacity_blocks, sid)
        w.nodes[sid] = SubsystemNode(sim, fabric, sub, epoch_shim=shim, controller=ctl)

    if mode is ArchitectureMode.SYMMETRIC:
        store = MetadataStore(esz, placement)
        for sid, sub in subsystems.items():
            store.register_subsystem(sid, sub.capacity_blocks)
            sub.set_acl(0, sub.capacity_blocks, appliance_id(0))
        app = Appliance(sim, fabric, appliance_id(0), ApplianceMode.SYMMETRIC_OWNER, store,
                        cfg.block_size, rng, resolution_log)
        w.appliances[app.node_id] = app
    elif mode is ArchitectureMode.SEMI_SYMMETRIC:
        for i in range(n_app):
            app = Appliance(sim, fabric, appliance_id(i), ApplianceMode.SEMI_SYMMETRIC_PRESENTER,
                            None, cfg.block_size, rng, resolution_log)
            w.appliances[app.node_id] = app

    if mode in (ArchitectureMode.ASYMMETRIC, ArchitectureMode.SEMI_SYMMETRIC):
        store = MetadataStore(esz, placement)
        for sid, sub in subsystems.items():
            store.register_subsystem(sid, sub.capacity_blocks)
        if shim:
            all_subs = sorted(subsystems)
            w.mdc = MetadataCenter(sim, fabric, store,
                                   acl_holder=lambda vid: w.volume_hosts[vid][0],
                                   fence_targets=lambda vid: all_subs, rng=rng)
        else:
            w.mdc = MetadataCenter(sim, fabric, store, acl_holder=w.appliance_for,
                                   fence_targets=lambda vid: [w.appliance_for(vid)],
                                   presenter=w.appliance_for, rng=rng)

    if mode is ArchitectureMode.SERVER_LEVEL:
        n = len(subsystems)
        sids = list(subsystems)
        for h, hid in enumerate(hosts):
            store = MetadataStore(esz, placement)
            # each host walks the SAN starting at "its" subsystem
            for k in range(n):
                sid = sids[(h + k) % n]
                sub = subsystems[sid]
                per = (sub.capacity_blocks // esz) // len(hosts)
                if per == 0:
                    continue
                base = h * per * esz
                store.register_subsystem(sid, per * esz, base_lba=base)
                sub.set_acl(base, per * esz, hid)
            w.host_stores[hid] = store

    for hid in hosts:
        ctl = {ArchitectureMode.SYMMETRIC: appliance_id(0),
               ArchitectureMode.ASYMMETRIC: MDC,
               ArchitectureMode.SEMI_SYMMETRIC: MDC}.get(mode)
        w.drivers[hid] = VolumeDriver(sim, fabric, hid, mode.value, w.catalog, ctl,
                                      w.host_stores.get(hid), cfg.block_size)
    return w


def _audit_hook(sim, log, block_size):
    def on_write(sid, lba, data, initiator):
        if initiator is None:
            return  # copy engine: moves data, does not create it
        uid, vol, vlba = decode_stamps(data, block_size)
        log.append((sim.now, sid, lba, uid.copy(), vol, vlba))
    return on_write

