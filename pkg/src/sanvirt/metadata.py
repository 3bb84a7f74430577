"""Control plane: the metadata store and the metadata-center node.

:class:`MetadataStore` owns pools, mapping tables and the record of which
holder was granted which epoch.  It is a plain single-writer state machine;
the appliance (symmetric mode), each host (server-level mode) and each
subsystem controller (subsystem-level mode) embed one too.

:class:`MetadataCenter` puts a store on the fabric for the asymmetric and
semi-symmetric methods.  It answers path resolutions, zones newly allocated
extents, and runs online migration as fence -> copy -> commit -> invalidate.
"""
from __future__ import annotations

import logging
import struct
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Optional

from . import wire
from .errors import (STATUS_OK, CorruptSnapshot, DuplicateId, InvalidConfig,
                     PoolExhausted, SanError, Unauthorized, UnknownPool,
                     UnknownVolume)
from .extent import (DEFAULT_EXTENT_BLOCKS, MappingTable, PhysicalLocation,
                     Placement, StripeLayout, ThinPool, migrate_extent,
                     resolve, thin_allocate)
from .fabric import Message
from .wire import Invalidation, PathGrant

log = logging.getLogger(__name__)

THIN, FULL, STRIPED = "thin", "full", "striped"
POLICIES = (THIN, FULL, STRIPED)

_MAGIC = b"SANMETA1"


@dataclass(frozen=True)
class SubsystemInfo:
    subsystem_id: str
    capacity_blocks: int
    pool_id: str
    base_lba: int = 0


@dataclass(frozen=True)
class VolumePolicy:
    kind: str = THIN
    layout: Optional[StripeLayout] = None


class MetadataStore:
    def __init__(self, extent_size_blocks=DEFAULT_EXTENT_BLOCKS,
                 placement=Placement.ROUND_ROBIN, default_pool="default"):
        self.pools: dict[str, ThinPool] = {}
        self.tables: dict[int, MappingTable] = {}
        self.subsystems: dict[str, SubsystemInfo] = {}
        self.grants_issued: dict[tuple, int] = {}
        self.invalidated: dict[tuple, int] = {}
        self.volume_pool: dict[int, str] = {}
        self.policies: dict[int, VolumePolicy] = {}
        self.holders: dict[int, set] = {}
        self.next_volume_id = 0
        if default_pool is not None:
            self.create_pool(default_pool, extent_size_blocks, placement)

    # -- registry ---------------------------------------------------------

    def create_pool(self, pool_id, extent_size_blocks=DEFAULT_EXTENT_BLOCKS,
                    placement=Placement.ROUND_ROBIN):
        if pool_id in self.pools:
            raise DuplicateId(f"pool {pool_id!r} exists")
        self.pools[pool_id] = ThinPool(pool_id, extent_size_blocks, placement)
        return self.pools[pool_id]

    def pool(self, pool_id):
        try:
            return self.pools[pool_id]
        except KeyError:
            raise UnknownPool(f"no pool {pool_id!r}") from None

    def register_subsystem(self, subsystem_id, capacity_blocks, pool_id="default", base_lba=0):
        """Enter a subsystem's whole extents into a pool's free list."""
        if subsystem_id in self.subsystems:
            raise DuplicateId(f"subsystem {subsystem_id!r} already registered")
        pool = self.pool(pool_id)
        info = SubsystemInfo(subsystem_id, capacity_blocks, pool_id, base_lba)
        self.subsystems[subsystem_id] = info
        pool.add_backing(subsystem_id, capacity_blocks // pool.extent_size_blocks, base_lba)
        return info

    # -- volumes ----------------------------------------------------------

    def create_virtual_volume(self, pool_id, size_blocks, policy=THIN, layout=None,
                              volume_id=None, holders=()):
        pool = self.pool(pool_id)
        if policy not in POLICIES:
            raise ValueError(f"unknown provisioning policy {policy!r}")
        if volume_id is None:
            volume_id = self.next_volume_id
        if volume_id in self.tables:
            raise DuplicateId(f"volume {volume_id} exists")
        table = MappingTable(volume_id, size_blocks, pool.extent_size_blocks)
        n = table.n_extents
        if policy == FULL:
            free = sum(pool.available_on(s) for s in pool.order)
            if free < n:
                raise PoolExhausted(f"volume needs {n} extents, pool {pool_id!r} has {free}")
            for i in range(n):
                table.locations[i] = pool.take((volume_id, i))
        elif policy == STRIPED:
            if layout is None:
                raise ValueError("striped volumes need a stripe layout")
            if layout.stripe_unit_blocks % pool.extent_size_blocks:
                raise ValueError("stripe unit must be a whole number of extents")
            devices = []
            for i in range(n):
                dev = stripe_device(layout, i, pool.extent_size_blocks)
                if dev not in pool.free:
                    raise ValueError(f"stripe device {dev!r} is not in pool {pool_id!r}")
                devices.append(dev)
            for dev in set(devices):
                need, have = devices.count(dev), pool.available_on(dev)
                if have < need:
                    raise PoolExhausted(f"{dev} has {have} free extents, stripe needs {need}")
            for i, dev in enumerate(devices):
                table.locations[i] = pool.take((volume_id, i), subsystem_id=dev)
        self.tables[volume_id] = table
        self.volume_pool[volume_id] = pool_id
        self.policies[volume_id] = VolumePolicy(policy, layout)
        self.holders[volume_id] = set(holders)
        self.next_volume_id = max(self.next_volume_id, volume_id + 1)
        return volume_id

    def table(self, volume_id):
        try:
            return self.tables[volume_id]
        except KeyError:
            raise UnknownVolume(f"no volume {volume_id}") from None

    def pool_of(self, volume_id):
        return self.pools[self.volume_pool[volume_id]]

    def authorize(self, volume_id, holder):
        self.table(volume_id)
        self.holders[volume_id].add(holder)

    def is_authorized(self, volume_id, holder):
        return holder in self.holders.get(volume_id, ())

    # -- data path support --------------------------------------------------

    def handle_resolve(self, volume_id, start, length, requester, for_write=False):
        """Resolve a range for ``requester``; writes allocate thin extents first.

        The returned grant lists newly mapped extent indices in ``allocated``
        (not part of the wire form).  Unallocated extents in a read come back
        as ``Segment(None, n)``: the caller zero-fills.
        """
        table = self.table(volume_id)
        if not self.is_authorized(volume_id, requester):
            raise Unauthorized(f"{requester} may not access volume {volume_id}")
        allocated = []
        if for_write:
            allocated = thin_allocate(self.pool_of(volume_id), table, start, length)
        segments = resolve(table, start, length, allow_unallocated=True)
        self.grants_issued[(volume_id, requester)] = table.epoch
        grant = PathGrant(volume_id, segments, table.epoch, requester)
        grant.allocated = allocated
        return grant

    def reserve_target(self, volume_id, extent_index):
        """Hold a free slot on a different subsystem as a migration target."""
        loc = self.table(volume_id).locations[extent_index]
        exclude = {loc.subsystem_id} if loc is not None else set()
        return self.pool_of(volume_id).reserve(exclude)

    def release_target(self, volume_id, loc):
        self.pool_of(volume_id).unreserve(loc)

    def migrate_and_invalidate(self, volume_id, extent_index, new_loc):
        """Commit a remap (the caller has copied the data).

        Returns the invalidation and the holders it must be sent to.
        """
        table = self.table(volume_id)
        epoch = migrate_extent(self.pool_of(volume_id), table, extent_index, new_loc)
        holders = sorted(h for (v, h) in self.grants_issued if v == volume_id)
        for h in holders:
            self.invalidated[(volume_id, h)] = epoch
        return Invalidation(volume_id, epoch), holders

    def stale_holders(self, volume_id):
        epoch = self.table(volume_id).epoch
        return sorted(h for (v, h), e in self.grants_issued.items()
                      if v == volume_id and e < epoch
                      and self.invalidated.get((v, h), -1) < epoch)

    # -- accounting -------------------------------------------------------

    @property
    def capacity_extents(self):
        return sum(p.capacity_extents for p in self.pools.values())

    @property
    def allocated_extents(self):
        return sum(p.allocated_extents for p in self.pools.values())

    @property
    def free_extents(self):
        return sum(p.free_extents for p in self.pools.values())

    # -- snapshot ---------------------------------------------------------

    def snapshot(self):
        """Serialize registry, pools, tables and grant records.

        Layout: ``magic, body_len: u64, body, crc32(body): u32``.
        """
        w = wire.Writer()
        w.u64(self.next_volume_id)
        w.u32(len(self.pools))
        for pid in sorted(self.pools):
            p = self.pools[pid]
            w.str(pid)
            w.u32(p.extent_size_blocks)
            w.str(p.placement.value)
            w.u32(p.cursor)
            w.u32(len(p.order))
            for sid in p.order:
                w.str(sid)
                w.u32(len(p.backing[sid]))
                for base, n in p.backing[sid]:
                    w.u64(base)
                    w.u64(n)
                w.u64(len(p.free[sid]))
                for lba in p.free[sid]:
                    w.u64(lba)
            w.u32(len(p.reserved))
            for loc in sorted(p.reserved):
                wire.write_location(w, loc)
        w.u32(len(self.subsystems))
        for info in self.subsystems.values():
            w.str(info.subsystem_id)
            w.u64(info.capacity_blocks)
            w.str(info.pool_id)
            w.u64(info.base_lba)
        w.u32(len(self.tables))
        for vid in sorted(self.tables):
            pol = self.policies[vid]
            w.str(self.volume_pool[vid])
            w.str(pol.kind)
            if pol.layout is None:
                w.u32(0)
                w.u16(0)
            else:
                w.u32(pol.layout.stripe_unit_blocks)
                w.u16(pol.layout.device_count)
                for d in pol.layout.device_ids:
                    w.str(d)
            holders = sorted(self.holders[vid])
            w.u16(len(holders))
            for h in holders:
                w.str(h)
            wire.write_table(w, self.tables[vid])
        for records in (self.grants_issued, self.invalidated):
            w.u32(len(records))
            for (vid, holder) in sorted(records):
                w.u64(vid)
                w.str(holder)
                w.u64(records[(vid, holder)])
        body = w.getvalue()
        return _MAGIC + struct.pack("<Q", len(body)) + body + struct.pack(
            "<I", zlib.crc32(body))

    @classmethod
    def restore(cls, data):
        head = len(_MAGIC) + 8
        if len(data) < head + 4 or data[:len(_MAGIC)] != _MAGIC:
            raise CorruptSnapshot("bad magic or truncated snapshot")
        (n,) = struct.unpack_from("<Q", data, len(_MAGIC))
        if head + n + 4 != len(data):
            raise CorruptSnapshot("length prefix does not match snapshot size")
        body = data[head:head + n]
        (crc,) = struct.unpack_from("<I", data, head + n)
        if zlib.crc32(body) != crc:
            raise CorruptSnapshot("checksum mismatch")
        try:
            return cls._decode(body)
        except (ValueError, KeyError, UnicodeDecodeError, struct.error) as exc:
            raise CorruptSnapshot(f"malformed snapshot body: {exc}") from None

    @classmethod
    def _decode(cls, body):
        r = wire.Reader(body)
        store = cls(default_pool=None)
        store.next_volume_id = r.u64()
        for _ in range(r.u32()):
            pid, esz, placement, cursor = r.str(), r.u32(), r.str(), r.u32()
            p = ThinPool(pid, esz, placement)
            for _ in range(r.u32()):
                sid = r.str()
                p.order.append(sid)
                p.allocated_on[sid] = 0
                p.backing[sid] = [(r.u64(), r.u64()) for _ in range(r.u32())]
                p.capacity_extents += sum(n for _, n in p.backing[sid])
                p.free[sid] = deque(r.u64() for _ in range(r.u64()))
            p.reserved = {wire.read_location(r) for _ in range(r.u32())}
            p.cursor = cursor
            store.pools[pid] = p
        for _ in range(r.u32()):
            info = SubsystemInfo(r.str(), r.u64(), r.str(), r.u64())
            store.subsystems[info.subsystem_id] = info
        for _ in range(r.u32()):
            pid, kind, unit, ndev = r.str(), r.str(), r.u32(), r.u16()
            devs = tuple(r.str() for _ in range(ndev))
            layout = StripeLayout(devs, unit) if ndev else None
            holders = {r.str() for _ in range(r.u16())}
            table = wire.read_table(r)
            vid = table.volume_id
            store.tables[vid] = table
            store.volume_pool[vid] = pid
            store.policies[vid] = VolumePolicy(kind, layout)
            store.holders[vid] = holders
            pool = store.pools[pid]
            for idx, loc in enumerate(table.locations):
                if loc is not None:
                    pool._own(loc, (vid, idx))
        for records in (store.grants_issued, store.invalidated):
            for _ in range(r.u32()):
                vid, holder, epoch = r.u64(), r.str(), r.u64()
                records[(vid, holder)] = epoch
        if not r.done():
            raise ValueError("trailing bytes")
        return store


def stripe_device(layout, extent_index, extent_size_blocks):
    from .extent import stripe_locate
    return stripe_locate(layout, extent_index * extent_size_blocks)[0]


def register_subsystem(store, subsystem_id, capacity_blocks, pool_id="default"):
    return store.register_subsystem(subsystem_id, capacity_blocks, pool_id)


def create_virtual_volume(store, pool_id, size_blocks, policy=THIN, layout=None):
    return store.create_virtual_volume(pool_id, size_blocks, policy, layout)


def handle_resolve(store, volume_id, start, length, requester, for_write=False):
    return store.handle_resolve(volume_id, start, length, requester, for_write)


def migrate_and_invalidate(store, volume_id, extent_index, new_loc):
    return store.migrate_and_invalidate(volume_id, extent_index, new_loc)


def snapshot(store):
    return store.snapshot()


def restore(data):
    return MetadataStore.restore(data)


@dataclass
class _Migration:
    volume_id: int
    extent_index: Optional[int]
    new_loc: Optional[PhysicalLocation]
    old_loc: Optional[PhysicalLocation] = None
    fence_epoch: int = 0
    acks_pending: int = 0


class MetadataCenter:
    """The out-of-band control node of the asymmetric and semi-symmetric methods.

    ``acl_holder(volume_id)`` names the initiator that newly allocated extents
    are zoned to (the host in asymmetric mode, the volume's appliance in
    semi-symmetric mode).  ``presenter(volume_id)`` names the appliance whose
    map must follow the table, or None.  ``fence_targets(volume_id)`` lists the
    data-path nodes that must reject the old epoch before a copy starts.
    """

    def __init__(self, sim, fabric, store, acl_holder, fence_targets, presenter=None,
                 node_id="mdc", rng=None):
        self.sim = sim
        self.fabric = fabric
        self.store = store
        self.node_id = node_id
        self.acl_holder = acl_holder
        self.fence_targets = fence_targets
        self.presenter = presenter or (lambda vid: None)
        self.rng = rng
        self.paused: dict[int, list] = {}
        self.migrations: deque = deque()
        self.active: Optional[_Migration] = None
        self.migrations_done = 0
        self.migrations_skipped = 0
        self.resolves_handled = 0
        self.published: set[int] = set()
        fabric.attach(node_id, self.receive)

    def _send(self, dst, body):
        self.fabric.send(Message(self.node_id, dst, body.NAME, wire.wire_size(body), body))

    def receive(self, msg):
        body = msg.body
        if isinstance(body, wire.ResolveReq):
            if body.volume_id in self.paused:
                self.paused[body.volume_id].append(msg)
            else:
                self._answer(msg)
        elif isinstance(body, wire.FenceAck):
            self._on_fence_ack(body)
        elif isinstance(body, wire.CopyDone):
            self._on_copy_done(body)
        elif isinstance(body, wire.MigrateExtent):
            self.request_migration(body.volume_id, body.extent_index, body.location)
        elif isinstance(body, wire.CreateVolume):
            layout = (StripeLayout(body.stripe_devices, body.stripe_unit_blocks)
                      if body.policy == STRIPED else None)
            vid = self.store.create_virtual_volume(body.pool_id, body.size_blocks,
                                                   body.policy, layout)
            self.authorize_and_publish(vid, msg.src)
        elif isinstance(body, wire.RegisterSubsystem):
            self.store.register_subsystem(body.subsystem_id, body.capacity_blocks,
                                          body.pool_id)
        else:
            raise ValueError(f"metadata center cannot handle {msg.kind}")

    def authorize_and_publish(self, volume_id, holder):
        """Authorize a holder and zone/publish whatever the volume already maps."""
        self.store.authorize(volume_id, holder)
        if volume_id in self.published:
            return
        self.published.add(volume_id)
        table = self.store.table(volume_id)
        target = self.presenter(volume_id)
        if target is not None:
            self._send(target, wire.MapPush(volume_id, table.epoch, table.copy()))
        for idx in table.mapped_indices():
            self._zone(volume_id, idx, table.locations[idx])

    def _zone(self, volume_id, idx, loc, initiator=None):
        table = self.store.tables[volume_id]
        self._send(loc.subsystem_id, wire.AclSet(
            volume_id, table.epoch, loc.device_lba, table.extent_size_blocks,
            self.acl_holder(volume_id) if initiator is None else initiator))

    def _answer(self, msg):
        body = msg.body
        self.resolves_handled += 1
        try:
            grant = self.store.handle_resolve(body.volume_id, body.start, body.length,
                                              body.requester, body.for_write)
        except PoolExhausted as exc:
            self._publish_allocations(body.volume_id, exc.allocated)
            self._send(msg.src, wire.ResolveRsp(body.volume_id, body.epoch, exc.status,
                                                tag=body.tag))
            return
        except SanError as exc:
            self._send(msg.src, wire.ResolveRsp(body.volume_id, body.epoch, exc.status,
                                                tag=body.tag))
            return
        self._publish_allocations(body.volume_id, grant.allocated)
        # zoning and map updates leave before the grant so they reach the
        # data path ahead of any I/O that uses it (every hop is FIFO)
        self._send(msg.src, wire.ResolveRsp(body.volume_id, grant.epoch, STATUS_OK, grant,
                                            tag=body.tag))

    def _publish_allocations(self, volume_id, indices):
        table = self.store.tables[volume_id]
        target = self.presenter(volume_id)
        for idx in indices:
            loc = table.locations[idx]
            self._zone(volume_id, idx, loc)
            if target is not None:
                self._send(target, wire.MapExtend(volume_id, table.epoch, idx, loc))

    # -- online migration --------------------------------------------------

    def request_migration(self, volume_id, extent_index=None, new_loc=None):
        """Queue a remap; None picks a random mapped extent / a free slot elsewhere."""
        self.store.table(volume_id)
        self.migrations.append(_Migration(volume_id, extent_index, new_loc))
        if self.active is None:
            self._start_next()

    @property
    def busy(self):
        return self.active is not None or bool(self.migrations)

    def _start_next(self):
        while self.migrations:
            m = self.migrations.popleft()
            table = self.store.table(m.volume_id)
            if m.extent_index is None:
                mapped = table.mapped_indices()
                if not mapped:
                    self.migrations_skipped += 1
                    continue
                m.extent_index = mapped[int(self.rng.integers(len(mapped)))] if self.rng \
                    else mapped[0]
            m.old_loc = table.locations[m.extent_index]
            if m.old_loc is None:
                self.migrations_skipped += 1
                continue
            try:
                if m.new_loc is None:
                    m.new_loc = self.store.reserve_target(m.volume_id, m.extent_index)
                else:
                    pool = self.store.pool_of(m.volume_id)
                    if m.new_loc in pool.owners or not pool.is_slot(m.new_loc):
                        raise InvalidConfig(f"{m.new_loc} is not a free slot")
                    pool.reserved.add(m.new_loc)
            except (PoolExhausted, InvalidConfig) as exc:
                log.warning("migration of volume %s skipped: %s", m.volume_id, exc)
                self.migrations_skipped += 1
                continue
            self.active = m
            self.paused.setdefault(m.volume_id, [])
            m.fence_epoch = table.epoch + 1
            targets = self.fence_targets(m.volume_id)
            m.acks_pending = len(targets)
            for t in targets:
                self._send(t, wire.EpochFence(m.volume_id, m.fence_epoch))
            if not targets:
                self._copy(m)
            return
        self.active = None

    def _on_fence_ack(self, body):
        m = self.active
        if m is None or body.volume_id != m.volume_id or body.epoch != m.fence_epoch:
            return
        m.acks_pending -= 1
        if m.acks_pending == 0:
            self._copy(m)

    def _copy(self, m):
        table = self.store.tables[m.volume_id]
        self._zone(m.volume_id, m.extent_index, m.new_loc)
        self._send(m.old_loc.subsystem_id, wire.CopyReq(
            m.volume_id, m.fence_epoch, m.old_loc.device_lba, m.new_loc.subsystem_id,
            m.new_loc.device_lba, table.extent_size_blocks, self.node_id))

    def _on_copy_done(self, body):
        m = self.active
        if m is None or body.volume_id != m.volume_id:
            return
        inv, holders = self.store.migrate_and_invalidate(m.volume_id, m.extent_index,
                                                         m.new_loc)
        assert inv.new_epoch == m.fence_epoch, (inv, m)
        table = self.store.tables[m.volume_id]
        target = self.presenter(m.volume_id)
        if target is not None:
            self._send(target, wire.MapPush(m.volume_id, inv.new_epoch, table.copy()))
        for h in holders:
            self._send(h, wire.Invalidate(m.volume_id, inv.new_epoch))
        self._send(m.old_loc.subsystem_id, wire.AclSet(
            m.volume_id, inv.new_epoch, m.old_loc.device_lba, table.extent_size_blocks, ""))
        self.migrations_done += 1
        waiting = self.paused.pop(m.volume_id, [])
        self.active = None
        for msg in waiting:
            self._answer(msg)
        self._start_next()
