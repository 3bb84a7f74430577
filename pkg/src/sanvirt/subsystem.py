"""Emulated backend storage array.

:class:`Subsystem` is the array itself: a sparse block store, a single FIFO
service queue, and LUN-range access control where each range belongs to at
most one initiator.  :class:`SubsystemNode` puts a subsystem on the fabric and
optionally adds an epoch check in front of it (asymmetric mode) or an embedded
virtualization controller (subsystem-level mode).
"""
from __future__ import annotations

import bisect
import io
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

from . import wire
from .errors import (STATUS_OK, AccessDenied, OutOfCapacity, SanError,
                     StaleEpoch, UnknownVolume)
from .extent import DEFAULT_BLOCK_SIZE
from .fabric import Message, transfer_us

GiB = 1 << 30
DEFAULT_SERVICE_LATENCY_US = 100
DEFAULT_INTERNAL_BANDWIDTH = GiB

_U64 = struct.Struct("<Q")


class MemoryBlockStore:
    def __init__(self, block_size=DEFAULT_BLOCK_SIZE):
        self.block_size = block_size
        self.blocks: dict[int, bytes] = {}

    def read(self, idx):
        return self.blocks.get(idx)

    def write(self, idx, data):
        self.blocks[idx] = data

    def discard(self, idx):
        self.blocks.pop(idx, None)

    def indices(self):
        return sorted(self.blocks)

    def __len__(self):
        return len(self.blocks)


class FileBlockStore:
    """Sparse file spill: block ``i`` lives at byte offset ``i * block_size``."""

    def __init__(self, path, block_size=DEFAULT_BLOCK_SIZE):
        self.block_size = block_size
        self.path = path
        self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        self._written: set[int] = set()

    def read(self, idx):
        if idx not in self._written:
            return None
        return os.pread(self._fd, self.block_size, idx * self.block_size)

    def write(self, idx, data):
        os.pwrite(self._fd, data, idx * self.block_size)
        self._written.add(idx)

    def discard(self, idx):
        self._written.discard(idx)

    def indices(self):
        return sorted(self._written)

    def __len__(self):
        return len(self._written)

    def close(self):
        os.close(self._fd)


class AclMap:
    """Non-overlapping block ranges, each zoned to exactly one initiator."""

    def __init__(self):
        self.starts: list[int] = []
        self.ends: list[int] = []
        self.owners: list[str] = []

    def set(self, start, length, initiator):
        end = start + length
        i = bisect.bisect_right(self.ends, start)
        keep_s, keep_e, keep_o = [], [], []
        j = i
        while j < len(self.starts) and self.starts[j] < end:
            s, e, o = self.starts[j], self.ends[j], self.owners[j]
            if s < start:
                keep_s.append(s), keep_e.append(start), keep_o.append(o)
            if e > end:
                keep_s.append(end), keep_e.append(e), keep_o.append(o)
            j += 1
        new = list(zip(keep_s, keep_e, keep_o))
        if initiator:
            new.append((start, end, initiator))
        new.sort()
        self.starts[i:j] = [n[0] for n in new]
        self.ends[i:j] = [n[1] for n in new]
        self.owners[i:j] = [n[2] for n in new]
        self._merge_around(i, i + len(new))

    def _merge_around(self, lo, hi):
        k = max(lo - 1, 0)
        hi = min(hi + 1, len(self.starts))
        while k < hi - 1 and k < len(self.starts) - 1:
            if self.ends[k] == self.starts[k + 1] and self.owners[k] == self.owners[k + 1]:
                self.ends[k] = self.ends[k + 1]
                del self.starts[k + 1], self.ends[k + 1], self.owners[k + 1]
                hi -= 1
            else:
                k += 1

    def holder(self, lba):
        i = bisect.bisect_right(self.starts, lba) - 1
        if i >= 0 and lba < self.ends[i]:
            return self.owners[i]
        return None

    def permits(self, initiator, start, length):
        pos, end = start, start + length
        while pos < end:
            i = bisect.bisect_right(self.starts, pos) - 1
            if i < 0 or pos >= self.ends[i] or self.owners[i] != initiator:
                return False
            pos = self.ends[i]
        return True

    def ranges(self):
        return list(zip(self.starts, self.ends, self.owners))


@dataclass
class BackendIo:
    op: str
    lba: int
    length: int
    initiator: str
    data: bytes = b""

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("backend I/O must cover at least one block")


class Completion(NamedTuple):
    time: int
    data: Optional[bytes]


class Subsystem:
    def __init__(self, subsystem_id, capacity_blocks, service_latency_us=DEFAULT_SERVICE_LATENCY_US,
                 internal_bandwidth_bytes_per_s=DEFAULT_INTERNAL_BANDWIDTH,
                 block_size=DEFAULT_BLOCK_SIZE, store=None):
        self.subsystem_id = subsystem_id
        self.capacity_blocks = capacity_blocks
        self.service_latency_us = service_latency_us
        self.internal_bandwidth = internal_bandwidth_bytes_per_s
        self.block_size = block_size
        self.store = store if store is not None else MemoryBlockStore(block_size)
        self.acl = AclMap()
        self.busy_until = 0
        self.ops = 0
        self.on_write = None  # audit hook: fn(subsystem_id, lba, data, initiator)

    def _check_range(self, lba, length):
        if lba < 0 or length < 0 or lba + length > self.capacity_blocks:
            raise OutOfCapacity(f"[{lba}, {lba + length}) beyond {self.subsystem_id} "
                                f"capacity {self.capacity_blocks}")

    def set_acl(self, start, length, initiator):
        """Zone a range to ``initiator``, replacing any previous holder."""
        self._check_range(start, length)
        self.acl.set(start, length, initiator)
        return self.acl

    def clear_acl(self, start, length):
        self._check_range(start, length)
        self.acl.set(start, length, None)

    def submit(self, io_, at_time):
        """Run an initiator's I/O through access control and the device queue."""
        self._check_range(io_.lba, io_.length)
        if not self.acl.permits(io_.initiator, io_.lba, io_.length):
            raise AccessDenied(f"{io_.initiator} is not zoned for {self.subsystem_id} "
                               f"[{io_.lba}, {io_.lba + io_.length})")
        return self.device_io(io_.op, io_.lba, io_.length, io_.data, at_time, io_.initiator)

    def device_io(self, op, lba, length, data, at_time, initiator=None):
        """The device queue itself, below access control (used by the copy engine)."""
        self._check_range(lba, length)
        bs = self.block_size
        nbytes = length * bs
        start = max(at_time, self.busy_until)
        done = start + self.service_latency_us + transfer_us(nbytes, self.internal_bandwidth)
        self.busy_until = done
        self.ops += 1
        if op == wire.WRITE:
            if len(data) != nbytes:
                raise ValueError(f"write of {length} blocks carries {len(data)} bytes")
            mv = memoryview(data)
            for k in range(length):
                self.store.write(lba + k, bytes(mv[k * bs:(k + 1) * bs]))
            if self.on_write is not None:
                self.on_write(self.subsystem_id, lba, data, initiator)
            return Completion(done, None)
        return Completion(done, self.read_blocks(lba, length))

    def discard(self, lba, length):
        """Forget a range so it reads back as zeros (done to a migration source)."""
        self._check_range(lba, length)
        for k in range(length):
            self.store.discard(lba + k)

    def read_blocks(self, lba, length):
        zero = bytes(self.block_size)
        return b"".join(self.store.read(lba + k) or zero for k in range(length))

    def dump(self, stream):
        """Write ``count: u64`` then ``(index: u64, block)`` records in index order."""
        idx = self.store.indices()
        stream.write(_U64.pack(len(idx)))
        for i in idx:
            stream.write(_U64.pack(i))
            stream.write(self.store.read(i))

    def restore(self, stream):
        (count,) = _U64.unpack(_read_exact(stream, 8))
        for _ in range(count):
            (i,) = _U64.unpack(_read_exact(stream, 8))
            block = _read_exact(stream, self.block_size)
            self._check_range(i, 1)
            self.store.write(i, block)

    def dumps(self):
        buf = io.BytesIO()
        self.dump(buf)
        return buf.getvalue()


def _read_exact(stream, n):
    b = stream.read(n)
    if len(b) != n:
        raise ValueError("truncated block stream")
    return b


def submit(subsystem, io_, at_time):
    return subsystem.submit(io_, at_time)


def set_acl(subsystem, start, length, initiator):
    return subsystem.set_acl(start, length, initiator)


class SubsystemNode:
    """A subsystem attached to the fabric.

    ``epoch_shim`` rejects I/O whose epoch differs from the latest fence seen
    for its volume.  ``controller`` (a MetadataStore) turns the node into a
    subsystem-level virtualization manager that accepts virtual addresses.
    """

    def __init__(self, sim, fabric, subsystem, epoch_shim=False, controller=None):
        self.sim = sim
        self.fabric = fabric
        self.subsystem = subsystem
        self.node_id = subsystem.subsystem_id
        self.epoch_shim = epoch_shim
        self.epochs: dict[int, int] = {}
        self.controller = controller
        self.rejected = 0
        fabric.attach(self.node_id, self.receive)

    def _send(self, dst, body):
        self.fabric.send(Message(self.node_id, dst, body.NAME, wire.wire_size(body), body))

    def _reply(self, msg, status, payload=b""):
        self._send(msg.src, wire.IoRsp(status, payload, tag=msg.body.tag))

    def receive(self, msg):
        body = msg.body
        if isinstance(body, wire.IoReq):
            self._on_io(msg)
        elif isinstance(body, wire.AclSet):
            if body.initiator:
                self.subsystem.set_acl(body.lba, body.length, body.initiator)
            else:
                self.subsystem.clear_acl(body.lba, body.length)
        elif isinstance(body, wire.EpochFence):
            self.epochs[body.volume_id] = max(body.epoch, self.epochs.get(body.volume_id, 0))
            self._send(msg.src, wire.FenceAck(body.volume_id, body.epoch, tag=body.tag))
        elif isinstance(body, wire.CopyReq):
            done = self.subsystem.device_io(wire.READ, body.src_lba, body.length, b"",
                                            self.sim.now)
            # a move, not a copy: the slot returns to the pool clean once the
            # remap commits, and nothing can reach it meanwhile (fenced or held)
            self.subsystem.discard(body.src_lba, body.length)
            out = wire.CopyData(body.volume_id, body.epoch, body.dst_lba, body.length,
                                body.requester, done.data, tag=body.tag)
            self.sim.schedule_at(done.time, self._send, body.dst_subsystem, out)
        elif isinstance(body, wire.CopyData):
            done = self.subsystem.device_io(wire.WRITE, body.dst_lba, body.length,
                                            body.payload, self.sim.now)
            ack = wire.CopyDone(body.volume_id, body.epoch, STATUS_OK, tag=body.tag)
            self.sim.schedule_at(done.time, self._send, body.requester, ack)
        else:
            raise ValueError(f"{self.node_id} cannot handle {msg.kind}")

    def _on_io(self, msg):
        body = msg.body
        if self.epoch_shim and body.epoch != self.epochs.get(body.volume_id, 0):
            self.rejected += 1
            self._reply(msg, StaleEpoch.status)
            return
        try:
            if self.controller is not None:
                done = self._virtual_io(msg)
            else:
                io_ = BackendIo(body.op, body.lba, body.length, msg.src, body.payload)
                done = self.subsystem.submit(io_, self.sim.now)
        except SanError as exc:
            self._reply(msg, exc.status)
            return
        self.sim.schedule_at(done.time, self._reply, msg, STATUS_OK, done.data or b"")

    def _virtual_io(self, msg):
        body = msg.body
        store = self.controller
        if body.volume_id not in store.tables:
            raise UnknownVolume(f"volume {body.volume_id} is not on {self.node_id}")
        grant = store.handle_resolve(body.volume_id, body.lba, body.length, msg.src,
                                     for_write=body.op == wire.WRITE)
        parts, t = [], self.sim.now
        off = 0
        for seg in grant.segments:
            data = body.payload[off * self.subsystem.block_size:
                                (off + seg.length) * self.subsystem.block_size]
            if seg.location is None:
                parts.append(bytes(seg.length * self.subsystem.block_size))
            else:
                done = self.subsystem.submit(
                    BackendIo(body.op, seg.location.device_lba, seg.length, self.node_id,
                              data), self.sim.now)
                t = max(t, done.time)
                parts.append(done.data or b"")
            off += seg.length
        return Completion(t, b"".join(parts) if body.op == wire.READ else None)
