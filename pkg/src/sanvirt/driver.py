"""Host-side volume driver.

The driver cuts each request at extent boundaries and routes every piece
according to the architecture it was wired for:

* ``server_level``: resolve against the host's private store, then talk to
  the subsystems directly.
* ``subsystem_level`` and ``symmetric``: send virtual addresses to the node
  that owns the volume (a subsystem controller or the appliance).
* ``asymmetric`` and ``semi_symmetric``: pull a grant per extent from the
  metadata center, cache it, and stamp data I/O with the grant's epoch.
  The data goes to the subsystem directly (asymmetric) or to the volume's
  presentation appliance (semi-symmetric).  A ``StaleEpoch`` answer drops the
  cached grant and triggers a re-resolve, up to three attempts per piece.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from . import wire
from .errors import (STATUS_NAMES, STATUS_OK, IoFailed, OutOfRange, SanError,
                     StaleEpoch)
from .extent import PhysicalLocation, split_range
from .fabric import Message

GRANT_MODES = ("asymmetric", "semi_symmetric")
MAX_ATTEMPTS = 3


@dataclass
class IoRequest:
    volume_id: int
    op: str
    start: int
    length: int
    payload: bytes = b""

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("I/O must cover at least one block")


@dataclass
class IoCompletion:
    request: IoRequest
    status: str
    latency_us: int
    submitted_at: int
    completed_at: int
    data: bytes = b""

    @property
    def ok(self):
        return self.status == "Ok"


@dataclass
class VolumeInfo:
    """What a host learns when it opens a volume."""
    volume_id: int
    size_blocks: int
    extent_size_blocks: int
    epoch: int = 0
    data_target: Optional[str] = None


@dataclass
class CachedGrant:
    location: Optional[PhysicalLocation]
    epoch: int


@dataclass
class VolumeHandle:
    info: VolumeInfo
    known_epoch: int
    grants: dict = field(default_factory=dict)

    @property
    def volume_id(self):
        return self.info.volume_id


@dataclass
class DriverStats:
    ios_issued: int = 0
    cache_hits: int = 0
    resolves: int = 0
    re_resolves: int = 0
    stale_epochs: int = 0
    stale_recovered: int = 0
    io_failed: int = 0
    local_zero_fills: int = 0


@dataclass
class _Piece:
    op: str
    extent_index: int
    vstart: int
    length: int
    payload: bytes
    attempts: int = 0
    epoch: int = 0
    stale_seen: int = 0
    data: bytes = b""
    status: int = STATUS_OK


@dataclass
class _Op:
    handle: VolumeHandle
    request: IoRequest
    pieces: list
    callback: Optional[Callable]
    submitted_at: int
    pending: int


class VolumeDriver:
    def __init__(self, sim, fabric, host_id, mode, catalog, control_target=None,
                 local_store=None, block_size=4096, max_attempts=MAX_ATTEMPTS):
        self.sim = sim
        self.fabric = fabric
        self.host_id = host_id
        self.mode = mode
        self.catalog = catalog
        self.control_target = control_target
        self.local_store = local_store
        self.block_size = block_size
        self.max_attempts = max_attempts
        self.handles: dict[int, VolumeHandle] = {}
        self.stats = DriverStats()
        self._tags = 0
        self._inflight: dict[int, tuple] = {}
        self._resolving: dict[tuple, list] = {}
        fabric.attach(host_id, self.receive)

    def _send(self, dst, body):
        self.fabric.send(Message(self.host_id, dst, body.NAME, wire.wire_size(body), body))

    def open_volume(self, volume_id):
        """Open a volume with an empty grant cache at its current epoch."""
        info = self.catalog(self.host_id, volume_id)
        handle = VolumeHandle(info, info.epoch)
        self.handles[volume_id] = handle
        return handle

    # -- submission -------------------------------------------------------

    def submit_io(self, handle, req, callback=None):
        if req.start < 0 or req.start + req.length > handle.info.size_blocks:
            raise OutOfRange(f"[{req.start}, {req.start + req.length}) outside volume "
                             f"{handle.volume_id}")
        bs = self.block_size
        if req.op == wire.WRITE and len(req.payload) != req.length * bs:
            raise ValueError(f"write of {req.length} blocks carries {len(req.payload)} bytes")
        pieces = []
        for idx, off, n in split_range(handle.info.extent_size_blocks, req.start, req.length):
            vstart = idx * handle.info.extent_size_blocks + off
            rel = vstart - req.start
            payload = req.payload[rel * bs:(rel + n) * bs] if req.op == wire.WRITE else b""
            pieces.append(_Piece(req.op, idx, vstart, n, payload))
        op = _Op(handle, req, pieces, callback, self.sim.now, len(pieces))
        for p in pieces:
            self._dispatch(op, p)
        return op

    def _dispatch(self, op, piece):
        mode = self.mode
        h = op.handle
        if mode in GRANT_MODES:
            g = h.grants.get(piece.extent_index)
            if g is not None and not (piece.op == wire.WRITE and g.location is None):
                self.stats.cache_hits += 1
                self._send_data(op, piece, g)
            else:
                self._await_grant(op, piece)
        elif mode == "server_level":
            try:
                grant = self.local_store.handle_resolve(
                    h.volume_id, piece.vstart, piece.length, self.host_id,
                    for_write=piece.op == wire.WRITE)
            except SanError as exc:
                self.sim.schedule(0, self._piece_done, op, piece, exc.status, b"")
                return
            seg = grant.segments[0]
            self._send_data(op, piece, CachedGrant(
                None if seg.location is None else PhysicalLocation(
                    seg.location.subsystem_id, seg.location.device_lba - (
                        piece.vstart % h.info.extent_size_blocks)), grant.epoch))
        else:
            self._issue(op, piece, h.info.data_target, piece.vstart, 0)

    def _send_data(self, op, piece, g):
        if g.location is None:
            # unallocated extent on the read path: zero-fill, nothing on the wire
            self.stats.local_zero_fills += 1
            self.sim.schedule(0, self._piece_done, op, piece, STATUS_OK,
                              bytes(piece.length * self.block_size))
            return
        off = piece.vstart % op.handle.info.extent_size_blocks
        if self.mode == "semi_symmetric":
            self._issue(op, piece, op.handle.info.data_target, piece.vstart, g.epoch)
        else:
            self._issue(op, piece, g.location.subsystem_id, g.location.device_lba + off,
                        g.epoch)

    def _issue(self, op, piece, dst, lba, epoch):
        piece.attempts += 1
        piece.epoch = epoch
        tag = self._tags
        self._tags += 1
        self._inflight[tag] = (op, piece)
        self.stats.ios_issued += 1
        self._send(dst, wire.IoReq(op.handle.volume_id, epoch, piece.op, lba, piece.length,
                                   piece.payload, tag=tag))

    # -- grants -------------------------------------------------------------

    def _await_grant(self, op, piece):
        h = op.handle
        write = piece.op == wire.WRITE
        for key in ((h.volume_id, piece.extent_index, True),
                    (h.volume_id, piece.extent_index, False)):
            if key in self._resolving and (key[2] or not write):
                self._resolving[key].append((op, piece))
                return
        key = (h.volume_id, piece.extent_index, write)
        self._resolving[key] = [(op, piece)]
        self._request_grant(h, key)

    def _request_grant(self, h, key):
        _, idx, write = key
        e = h.info.extent_size_blocks
        start = idx * e
        length = min(e, h.info.size_blocks - start)
        self.stats.resolves += 1
        self._send(self.control_target, wire.ResolveReq(
            h.volume_id, h.known_epoch, start, length, write, self.host_id, tag=key))

    def _on_resolve_rsp(self, rsp):
        key = rsp.tag
        waiters = self._resolving.get(key)
        if waiters is None:
            return
        h = self.handles[key[0]]
        if rsp.status != STATUS_OK:
            del self._resolving[key]
            for op, piece in waiters:
                self._piece_done(op, piece, rsp.status, b"")
            return
        grant = rsp.grant
        if grant.epoch < h.known_epoch:
            # answered before an invalidation we have already seen
            self._request_grant(h, key)
            return
        del self._resolving[key]
        h.known_epoch = grant.epoch
        seg = grant.segments[0]
        h.grants[key[1]] = CachedGrant(seg.location, grant.epoch)
        for op, piece in waiters:
            self._dispatch(op, piece)

    def handle_invalidate(self, inv):
        """Drop every cached grant of the volume; unknown volumes are ignored."""
        h = self.handles.get(inv.volume_id)
        if h is None:
            return
        h.grants.clear()
        h.known_epoch = max(h.known_epoch, inv.new_epoch)

    # -- completion ---------------------------------------------------------

    def receive(self, msg):
        body = msg.body
        if isinstance(body, wire.IoRsp):
            op, piece = self._inflight.pop(body.tag)
            if body.status == StaleEpoch.status:
                self._on_stale(op, piece)
            else:
                self._piece_done(op, piece, body.status, body.payload)
        elif isinstance(body, wire.ResolveRsp):
            self._on_resolve_rsp(body)
        elif isinstance(body, wire.Invalidate):
            self.handle_invalidate(wire.Invalidation(body.volume_id, body.epoch))
        else:
            raise ValueError(f"{self.host_id} cannot handle {msg.kind}")

    def _on_stale(self, op, piece):
        self.stats.stale_epochs += 1
        piece.stale_seen += 1
        g = op.handle.grants.get(piece.extent_index)
        if g is not None and g.epoch <= piece.epoch:
            del op.handle.grants[piece.extent_index]
        if piece.attempts >= self.max_attempts:
            self.stats.io_failed += 1
            self._piece_done(op, piece, IoFailed.status, b"")
            return
        self.stats.re_resolves += 1
        self._dispatch(op, piece)

    def _piece_done(self, op, piece, status, data):
        piece.status = status
        piece.data = data
        if status == STATUS_OK and piece.stale_seen:
            self.stats.stale_recovered += 1
        op.pending -= 1
        if op.pending:
            return
        status = next((p.status for p in op.pieces if p.status != STATUS_OK), STATUS_OK)
        data = b""
        if op.request.op == wire.READ and status == STATUS_OK:
            data = b"".join(p.data for p in op.pieces)
        done = IoCompletion(op.request, STATUS_NAMES.get(status, str(status)),
                            self.sim.now - op.submitted_at, op.submitted_at, self.sim.now,
                            data)
        if op.callback is not None:
            op.callback(done)


def open_volume(driver, volume_id):
    return driver.open_volume(volume_id)


def submit_io(driver, handle, req, callback=None):
    return driver.submit_io(handle, req, callback)


def handle_invalidate(driver, inv):
    driver.handle_invalidate(inv)
