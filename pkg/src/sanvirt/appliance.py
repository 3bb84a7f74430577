"""The in-band virtualization box.

In symmetric mode the appliance owns the mapping tables outright and every
host I/O is resolved and forwarded here.  In semi-symmetric mode it is a
presenter: its tables are copies pushed by the metadata center, and it
rejects any I/O whose epoch does not match its copy.

The appliance holds no payload cache.  Each host request is forwarded to the
subsystems and the answer relayed back, so every byte crosses the
appliance's link twice.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import wire
from .errors import (STATUS_OK, EpochRegression, IoFailed, SanError,
                     StaleEpoch, UnknownVolume)
from .extent import resolve
from .fabric import Message


class ApplianceMode(str, Enum):
    SYMMETRIC_OWNER = "symmetric_owner"
    SEMI_SYMMETRIC_PRESENTER = "semi_symmetric_presenter"


@dataclass
class ApplianceStats:
    host_in: int = 0        # write payload received from hosts
    backend_out: int = 0    # write payload forwarded to subsystems
    backend_in: int = 0     # read payload received from subsystems
    host_out: int = 0       # read payload relayed to hosts
    zero_fill_out: int = 0  # read payload synthesized for unallocated extents
    ios: int = 0
    rejected: int = 0

    @property
    def bytes_in(self):
        return self.host_in + self.backend_in

    @property
    def bytes_out(self):
        return self.backend_out + self.host_out


@dataclass
class _Forward:
    msg: Message
    pending: int
    parts: list
    status: int = STATUS_OK


@dataclass
class _OwnerMigration:
    volume_id: int
    extent_index: Optional[int]
    new_loc: object = None
    held: list = field(default_factory=list)


class Appliance:
    def __init__(self, sim, fabric, node_id, mode, store=None, block_size=4096, rng=None,
                 audit=None):
        self.sim = sim
        self.fabric = fabric
        self.node_id = node_id
        self.mode = ApplianceMode(mode)
        if self.mode is ApplianceMode.SYMMETRIC_OWNER and store is None:
            raise ValueError("a symmetric appliance needs its own metadata store")
        self.store = store
        self.block_size = block_size
        self.rng = rng
        self.tables = {}
        self.fenced: set[int] = set()
        self.stats = ApplianceStats()
        self.audit = audit
        self._forwards: dict[int, _Forward] = {}
        self._next_tag = 0
        self._migrations: deque = deque()
        self._active: Optional[_OwnerMigration] = None
        self.migrations_done = 0
        self.migrations_skipped = 0
        self.link = fabric.attach(node_id, self.receive)

    @property
    def busy_time_us(self):
        return max(ch.busy_us for ch in self.link.channels.values())

    def _send(self, dst, body):
        self.fabric.send(Message(self.node_id, dst, body.NAME, wire.wire_size(body), body))

    # -- dispatch ---------------------------------------------------------

    def receive(self, msg):
        body = msg.body
        if isinstance(body, wire.IoReq):
            self.forward_io(msg)
        elif isinstance(body, wire.IoRsp):
            self._backend_done(body)
        elif isinstance(body, wire.MapPush):
            self.apply_map_push(body.volume_id, body.table, body.epoch)
        elif isinstance(body, wire.MapExtend):
            self.apply_allocation(body.volume_id, body.epoch, body.extent_index, body.location)
        elif isinstance(body, wire.EpochFence):
            self.fenced.add(body.volume_id)
            self._send(msg.src, wire.FenceAck(body.volume_id, body.epoch, tag=body.tag))
        elif isinstance(body, wire.CopyDone):
            self._owner_commit()
        else:
            raise ValueError(f"{self.node_id} cannot handle {msg.kind}")

    # -- map maintenance (presenter) --------------------------------------

    def apply_map_push(self, volume_id, table, epoch):
        """Atomically replace the local copy of a volume's map."""
        cur = self.tables.get(volume_id)
        if cur is not None and epoch <= cur.epoch:
            raise EpochRegression(f"push of epoch {epoch} over {cur.epoch} "
                                  f"for volume {volume_id}")
        copy = table.copy()
        copy.epoch = epoch
        self.tables[volume_id] = copy
        self.fenced.discard(volume_id)

    def apply_allocation(self, volume_id, epoch, extent_index, location):
        """Record a freshly allocated extent; never changes an existing mapping."""
        cur = self.tables.get(volume_id)
        if cur is None:
            raise UnknownVolume(f"{self.node_id} does not present volume {volume_id}")
        if epoch != cur.epoch:
            raise EpochRegression(f"allocation at epoch {epoch}, local map is at {cur.epoch}")
        held = cur.locations[extent_index]
        if held is not None and held != location:
            raise EpochRegression(f"extent {extent_index} of volume {volume_id} is already "
                                  f"mapped to {held}")
        cur.locations[extent_index] = location

    # -- data path --------------------------------------------------------

    def _fail(self, msg, exc_cls):
        self.stats.rejected += 1
        self._send(msg.src, wire.IoRsp(exc_cls.status, tag=msg.body.tag))

    def _lookup(self, msg):
        body = msg.body
        if self.mode is ApplianceMode.SYMMETRIC_OWNER:
            grant = self.store.handle_resolve(body.volume_id, body.lba, body.length, msg.src,
                                              for_write=body.op == wire.WRITE)
            return grant.segments, grant.epoch
        table = self.tables.get(body.volume_id)
        if table is None:
            raise UnknownVolume(f"{self.node_id} does not present volume {body.volume_id}")
        if body.volume_id in self.fenced or body.epoch != table.epoch:
            raise StaleEpoch(f"I/O at epoch {body.epoch}, map at {table.epoch}")
        segs = resolve(table, body.lba, body.length, allow_unallocated=True)
        if body.op == wire.WRITE and any(s.location is None for s in segs):
            # the allocation has not reached this presenter yet
            raise StaleEpoch(f"extent of volume {body.volume_id} not yet mapped here")
        return segs, table.epoch

    def forward_io(self, msg):
        """Resolve a host I/O against the local map and relay it to the subsystems."""
        body = msg.body
        if self._active is not None and self._active.volume_id == body.volume_id:
            self._active.held.append(msg)
            return
        try:
            segments, epoch = self._lookup(msg)
        except SanError as exc:
            self._fail(msg, type(exc) if exc.status != 0xFF else IoFailed)
            return
        self.stats.ios += 1
        if self.audit is not None:
            self.audit.append((self.sim.now, body.volume_id, epoch, body.lba, body.length,
                               tuple(segments)))
        bs = self.block_size
        if body.op == wire.WRITE:
            self.stats.host_in += len(body.payload)
        tag = self._next_tag
        self._next_tag += 1
        fwd = _Forward(msg, 0, [None] * len(segments))
        self._forwards[tag] = fwd
        off = 0
        for i, seg in enumerate(segments):
            n = seg.length
            if seg.location is None:
                fwd.parts[i] = bytes(n * bs)
                self.stats.zero_fill_out += n * bs
            else:
                payload = body.payload[off * bs:(off + n) * bs] if body.op == wire.WRITE else b""
                self.stats.backend_out += len(payload)
                fwd.pending += 1
                self._send(seg.location.subsystem_id, wire.IoReq(
                    body.volume_id, epoch, body.op, seg.location.device_lba, n, payload,
                    tag=(tag, i)))
            off += n
        if fwd.pending == 0:
            self._finish(tag)

    def _backend_done(self, rsp):
        tag, i = rsp.tag
        fwd = self._forwards[tag]
        fwd.pending -= 1
        if rsp.status != STATUS_OK and fwd.status == STATUS_OK:
            fwd.status = rsp.status
        fwd.parts[i] = rsp.payload
        self.stats.backend_in += len(rsp.payload)
        if fwd.pending == 0:
            self._finish(tag)

    def _finish(self, tag):
        fwd = self._forwards.pop(tag)
        req = fwd.msg.body
        payload = b""
        if req.op == wire.READ and fwd.status == STATUS_OK:
            payload = b"".join(fwd.parts)
            self.stats.host_out += len(payload)
        self._send(fwd.msg.src, wire.IoRsp(fwd.status, payload, tag=req.tag))

    # -- online migration (owner) -------------------------------------------

    def request_migration(self, volume_id, extent_index=None, new_loc=None):
        if self.mode is not ApplianceMode.SYMMETRIC_OWNER:
            raise SanError("a presenter appliance does not own placement")
        self.store.table(volume_id)
        self._migrations.append(_OwnerMigration(volume_id, extent_index, new_loc))
        if self._active is None:
            self._start_next()

    @property
    def busy(self):
        return self._active is not None or bool(self._migrations)

    def _start_next(self):
        while self._migrations:
            m = self._migrations.popleft()
            table = self.store.table(m.volume_id)
            if m.extent_index is None:
                mapped = table.mapped_indices()
                if not mapped:
                    self.migrations_skipped += 1
                    continue
                m.extent_index = (mapped[int(self.rng.integers(len(mapped)))]
                                  if self.rng is not None else mapped[0])
            old = table.locations[m.extent_index]
            if old is None:
                self.migrations_skipped += 1
                continue
            if m.new_loc is None:
                m.new_loc = self.store.reserve_target(m.volume_id, m.extent_index)
            else:
                self.store.pool_of(m.volume_id).reserved.add(m.new_loc)
            self._active = m
            # forwarded I/O already on the wire reaches the old subsystem
            # before this copy request does; new I/O is held until commit
            self._send(old.subsystem_id, wire.CopyReq(
                m.volume_id, table.epoch + 1, old.device_lba, m.new_loc.subsystem_id,
                m.new_loc.device_lba, table.extent_size_blocks, self.node_id))
            return
        self._active = None

    def _owner_commit(self):
        m = self._active
        self.store.migrate_and_invalidate(m.volume_id, m.extent_index, m.new_loc)
        self.migrations_done += 1
        self._active = None
        for msg in m.held:
            self.forward_io(msg)
        self._start_next()


def forward_io(appliance, msg):
    return appliance.forward_io(msg)


def apply_map_push(appliance, volume_id, table_copy, epoch):
    return appliance.apply_map_push(volume_id, table_copy, epoch)
