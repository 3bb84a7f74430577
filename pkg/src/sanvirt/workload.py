"""Seeded per-host request streams and self-describing write payloads.

Every written block carries a 16-byte stamp ``(uid: u64, volume: u32,
vlba: u32)`` repeated to fill the block, so the final contents of any volume
can be traced back to the exact write that produced each block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .driver import IoRequest
from .wire import READ, WRITE

STAMP_BYTES = 16
# uids are unique across hosts: the high bits carry the host index
HOST_SHIFT = 40


@dataclass(frozen=True)
class WorkItem:
    op: str
    start: int
    length: int
    uid: int

    def request(self, volume_id, block_size):
        payload = b""
        if self.op == WRITE:
            payload = stamp_payload(self.uid, volume_id, self.start, self.length, block_size)
        return IoRequest(volume_id, self.op, self.start, self.length, payload)


def stamp_payload(uid, volume_id, start, length, block_size):
    if block_size % STAMP_BYTES:
        raise ValueError(f"block size {block_size} is not a multiple of {STAMP_BYTES}")
    words = np.empty((length, 2), dtype="<u8")
    words[:, 0] = uid
    words[:, 1] = volume_id | (np.arange(start, start + length, dtype=np.uint64) << 32)
    reps = block_size // STAMP_BYTES
    return np.ascontiguousarray(
        np.broadcast_to(words[:, None, :], (length, reps, 2))).tobytes()


def decode_stamps(data, block_size):
    """Return ``(uids, volumes, vlbas)`` arrays, one entry per block."""
    words = np.frombuffer(data, dtype="<u8").reshape(-1, block_size // 8)
    uid = words[:, 0]
    tail = words[:, 1]
    return uid, (tail & 0xFFFFFFFF).astype(np.int64), (tail >> 32).astype(np.int64)


def request_count(spec, block_size):
    per = spec.io_size_blocks * block_size
    return -(-spec.total_bytes // per)


def generate_workload(spec, seed, host, volume_blocks, block_size=4096):
    """The request stream of host index ``host``: a pure function of its arguments.

    Requests total exactly ``spec.total_bytes`` (the last one may be shorter).
    Sequential patterns walk the volume from block 0 and wrap; random and
    mixed patterns draw start addresses uniformly from the volume.
    """
    rng = np.random.default_rng([seed, host])
    n = request_count(spec, block_size)
    full = spec.io_size_blocks
    total_blocks = spec.total_bytes // block_size
    lengths = np.full(n, full, dtype=np.int64)
    if n:
        lengths[-1] = total_blocks - full * (n - 1)
    if lengths.max(initial=0) > volume_blocks:
        raise ValueError(f"{full}-block requests do not fit a {volume_blocks}-block volume")
    pattern = spec.pattern
    if pattern in ("sequential_read", "sequential_write"):
        starts = np.empty(n, dtype=np.int64)
        cursor = 0
        for i, ln in enumerate(lengths):
            if cursor + ln > volume_blocks:
                cursor = 0
            starts[i] = cursor
            cursor += ln
        reads = np.full(n, pattern == "sequential_read")
    else:
        starts = rng.integers(0, volume_blocks - lengths + 1)
        if pattern == "mixed":
            reads = rng.random(n) < spec.read_fraction
        else:
            reads = np.full(n, pattern == "random_read")
    base = host << HOST_SHIFT
    return [WorkItem(READ if r else WRITE, int(s), int(ln), base + i + 1)
            for i, (r, s, ln) in enumerate(zip(reads, starts, lengths))]
