"""Mapping mathematics: extent tables, thin pools, stripe layouts.

Everything here is pure bookkeeping. Nothing touches a clock or moves bytes;
the metadata center, the appliance and the host-private stores of the
server-level method all sit on top of these primitives.

A volume of ``size_blocks`` blocks is cut into fixed-size extents.  Extent
``i`` covers virtual blocks ``[i * extent_size, (i + 1) * extent_size)`` and is
either unallocated (``None``) or mapped to a :class:`PhysicalLocation`, the
first block of an equally sized slot on some subsystem.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, NamedTuple, Optional

from .errors import (ExtentUnallocated, OutOfRange, OverlapViolation,
                     PoolExhausted, UnallocatedRead)

DEFAULT_BLOCK_SIZE = 4096
DEFAULT_EXTENT_BLOCKS = 1024


class PhysicalLocation(NamedTuple):
    subsystem_id: str
    device_lba: int


class Segment(NamedTuple):
    """A run of ``length`` blocks; ``location`` is None for an unallocated run."""
    location: Optional[PhysicalLocation]
    length: int


@dataclass(frozen=True)
class Extent:
    extent_index: int
    location: Optional[PhysicalLocation] = None

    @property
    def mapped(self):
        return self.location is not None


class Placement(str, Enum):
    ROUND_ROBIN = "round_robin"
    LEAST_LOADED = "least_loaded"


class MappingTable:
    """Epoch-versioned map from virtual extents to physical slots."""

    def __init__(self, volume_id, size_blocks, extent_size_blocks=DEFAULT_EXTENT_BLOCKS,
                 epoch=0, locations=None):
        if size_blocks < 1 or extent_size_blocks < 1:
            raise ValueError("volume and extent sizes must be positive")
        self.volume_id = volume_id
        self.size_blocks = size_blocks
        self.extent_size_blocks = extent_size_blocks
        self.epoch = epoch
        n = -(-size_blocks // extent_size_blocks)
        if locations is None:
            locations = [None] * n
        elif len(locations) != n:
            raise ValueError(f"expected {n} extents, got {len(locations)}")
        self.locations: list[Optional[PhysicalLocation]] = list(locations)

    @property
    def n_extents(self):
        return len(self.locations)

    @property
    def extents(self):
        return [Extent(i, loc) for i, loc in enumerate(self.locations)]

    def extent(self, index):
        return Extent(index, self.locations[index])

    def extent_of(self, vlba):
        return vlba // self.extent_size_blocks

    def extent_length(self, index):
        """Blocks covered by extent ``index`` (the last one may be short)."""
        start = index * self.extent_size_blocks
        return min(self.extent_size_blocks, self.size_blocks - start)

    def mapped_indices(self):
        return [i for i, loc in enumerate(self.locations) if loc is not None]

    def copy(self):
        return MappingTable(self.volume_id, self.size_blocks, self.extent_size_blocks,
                            self.epoch, self.locations)

    def __eq__(self, other):
        if not isinstance(other, MappingTable):
            return NotImplemented
        return (self.volume_id, self.size_blocks, self.extent_size_blocks,
                self.epoch, self.locations) == (
                    other.volume_id, other.size_blocks, other.extent_size_blocks,
                    other.epoch, other.locations)

    def __repr__(self):
        used = sum(loc is not None for loc in self.locations)
        return (f"MappingTable(volume={self.volume_id!r}, blocks={self.size_blocks}, "
                f"extents={used}/{self.n_extents}, epoch={self.epoch})")


@dataclass(frozen=True)
class StripeLayout:
    device_ids: tuple
    stripe_unit_blocks: int

    def __post_init__(self):
        object.__setattr__(self, "device_ids", tuple(self.device_ids))
        if not self.device_ids:
            raise ValueError("stripe layout needs at least one device")
        if len(set(self.device_ids)) != len(self.device_ids):
            raise ValueError("stripe devices must be distinct")
        if self.stripe_unit_blocks < 1:
            raise ValueError("stripe unit must be at least one block")

    @property
    def device_count(self):
        return len(self.device_ids)


class ThinPool:
    """Central pool of fixed-size physical slots spread over subsystems.

    Free slots are kept per subsystem in ascending LBA order.  A slot may be
    *reserved* (held as a migration target); reserved slots still count as
    free but are never handed out by :meth:`take`.
    """

    def __init__(self, pool_id, extent_size_blocks=DEFAULT_EXTENT_BLOCKS,
                 placement=Placement.ROUND_ROBIN):
        self.pool_id = pool_id
        self.extent_size_blocks = extent_size_blocks
        self.placement = Placement(placement)
        self.order: list[str] = []
        self.free: dict[str, deque] = {}
        self.backing: dict[str, list[tuple[int, int]]] = {}
        self.reserved: set[PhysicalLocation] = set()
        self.owners: dict[PhysicalLocation, tuple] = {}
        self.allocated_on: dict[str, int] = {}
        self.capacity_extents = 0
        self.cursor = 0

    @property
    def allocated_extents(self):
        return len(self.owners)

    @property
    def free_extents(self):
        return sum(len(q) for q in self.free.values())

    def available_on(self, subsystem_id):
        held = sum(1 for loc in self.reserved if loc.subsystem_id == subsystem_id)
        return len(self.free[subsystem_id]) - held

    def add_backing(self, subsystem_id, n_extents, base_lba=0):
        """Enter ``n_extents`` slots starting at ``base_lba`` into the free list."""
        if subsystem_id not in self.free:
            self.order.append(subsystem_id)
            self.free[subsystem_id] = deque()
            self.backing[subsystem_id] = []
            self.allocated_on[subsystem_id] = 0
        e = self.extent_size_blocks
        self.free[subsystem_id].extend(base_lba + k * e for k in range(n_extents))
        self.backing[subsystem_id].append((base_lba, n_extents))
        self.capacity_extents += n_extents

    def is_slot(self, loc):
        for base, n in self.backing.get(loc.subsystem_id, ()):
            off = loc.device_lba - base
            if 0 <= off < n * self.extent_size_blocks and off % self.extent_size_blocks == 0:
                return True
        return False

    def _pick_subsystem(self, exclude=()):
        candidates = [s for s in self.order if s not in exclude and self.available_on(s)]
        if not candidates:
            raise PoolExhausted(f"pool {self.pool_id!r} has no free extent")
        if self.placement is Placement.LEAST_LOADED:
            return min(candidates, key=lambda s: (self.allocated_on[s], self.order.index(s)))
        n = len(self.order)
        for k in range(n):
            sid = self.order[(self.cursor + k) % n]
            if sid in candidates:
                self.cursor = (self.order.index(sid) + 1) % n
                return sid
        raise AssertionError("unreachable")

    def _pop_free(self, subsystem_id):
        q = self.free[subsystem_id]
        skipped = []
        try:
            while True:
                lba = q.popleft()
                loc = PhysicalLocation(subsystem_id, lba)
                if loc not in self.reserved:
                    return loc
                skipped.append(lba)
        except IndexError:
            raise PoolExhausted(f"subsystem {subsystem_id!r} has no free extent") from None
        finally:
            q.extendleft(reversed(skipped))

    def take(self, owner, subsystem_id=None):
        """Hand out one free slot to ``owner`` = (volume_id, extent_index)."""
        if subsystem_id is None:
            subsystem_id = self._pick_subsystem()
        elif subsystem_id not in self.free:
            raise PoolExhausted(f"subsystem {subsystem_id!r} is not in pool {self.pool_id!r}")
        loc = self._pop_free(subsystem_id)
        self._own(loc, owner)
        return loc

    def reserve(self, exclude=()):
        """Reserve a free slot, preferring subsystems not in ``exclude``."""
        try:
            sid = self._pick_subsystem(exclude)
        except PoolExhausted:
            sid = self._pick_subsystem()
        for lba in self.free[sid]:
            loc = PhysicalLocation(sid, lba)
            if loc not in self.reserved:
                self.reserved.add(loc)
                return loc
        raise AssertionError("unreachable")

    def unreserve(self, loc):
        self.reserved.discard(loc)

    def claim(self, loc, owner):
        """Take a specific slot (free or reserved) for ``owner``."""
        if loc in self.owners:
            raise OverlapViolation(f"{loc} is already mapped by {self.owners[loc]}")
        if not self.is_slot(loc):
            e = self.extent_size_blocks
            for other in self.owners:
                if (other.subsystem_id == loc.subsystem_id
                        and abs(other.device_lba - loc.device_lba) < e):
                    raise OverlapViolation(f"{loc} overlaps {other}")
            raise ValueError(f"{loc} is not an extent slot of pool {self.pool_id!r}")
        self.reserved.discard(loc)
        self.free[loc.subsystem_id].remove(loc.device_lba)
        self._own(loc, owner)

    def _own(self, loc, owner):
        self.owners[loc] = owner
        self.allocated_on[loc.subsystem_id] += 1

    def release(self, loc):
        del self.owners[loc]
        self.allocated_on[loc.subsystem_id] -= 1
        q = self.free[loc.subsystem_id]
        # keep the free list sorted so placement stays reproducible
        i = 0
        for i, lba in enumerate(q):
            if lba > loc.device_lba:
                q.insert(i, loc.device_lba)
                return
        q.append(loc.device_lba)


def split_range(extent_size, start, length) -> Iterator[tuple[int, int, int]]:
    """Yield ``(extent_index, offset_in_extent, n_blocks)`` pieces of a range."""
    pos, end = start, start + length
    while pos < end:
        idx, off = divmod(pos, extent_size)
        n = min(extent_size - off, end - pos)
        yield idx, off, n
        pos += n


def _check_range(table, start, length):
    if start < 0 or length < 0 or start + length > table.size_blocks:
        raise OutOfRange(f"[{start}, {start + length}) outside volume "
                         f"{table.volume_id!r} of {table.size_blocks} blocks")


def resolve(table, start, length, allow_unallocated=False):
    """Translate virtual blocks ``[start, start+length)`` into physical segments.

    Segments never cross an extent boundary, even when neighbouring extents
    happen to be physically adjacent.  With ``allow_unallocated`` an untouched
    extent yields a ``Segment(None, n)`` instead of raising UnallocatedRead.
    """
    _check_range(table, start, length)
    out = []
    for idx, off, n in split_range(table.extent_size_blocks, start, length):
        loc = table.locations[idx]
        if loc is None:
            if not allow_unallocated:
                raise UnallocatedRead(f"extent {idx} of volume {table.volume_id!r}")
            out.append(Segment(None, n))
        else:
            out.append(Segment(PhysicalLocation(loc.subsystem_id, loc.device_lba + off), n))
    return out


def touched_extents(table, start, length):
    _check_range(table, start, length)
    if length == 0:
        return range(0)
    e = table.extent_size_blocks
    return range(start // e, (start + length - 1) // e + 1)


def thin_allocate(pool, table, start, length):
    """Map every unallocated extent touched by a write; return the new indices.

    Extents are allocated one at a time, so when the pool runs dry the
    extents mapped so far stay mapped and are listed on the exception.
    """
    new = []
    for idx in touched_extents(table, start, length):
        if table.locations[idx] is not None:
            continue
        try:
            table.locations[idx] = pool.take((table.volume_id, idx))
        except PoolExhausted as exc:
            raise PoolExhausted(str(exc), allocated=new) from None
        new.append(idx)
    return new


def stripe_locate(layout, vlba):
    """Round-robin striping: ``(device_id, device_lba)`` for virtual block ``vlba``."""
    unit = layout.stripe_unit_blocks
    stripe_no, within = divmod(vlba, unit)
    row, dev = divmod(stripe_no, layout.device_count)
    return layout.device_ids[dev], row * unit + within


def migrate_extent(pool, table, extent_index, new_loc):
    """Remap one mapped extent onto ``new_loc`` and bump the table epoch.

    The old slot goes back to the pool's free list.  Returns the new epoch.
    """
    old = table.locations[extent_index]
    if old is None:
        raise ExtentUnallocated(f"extent {extent_index} of volume {table.volume_id!r}")
    pool.claim(new_loc, (table.volume_id, extent_index))
    pool.release(old)
    table.locations[extent_index] = new_loc
    table.epoch += 1
    return table.epoch


def pool_utilization(pool):
    if pool.capacity_extents == 0:
        return 0.0
    return pool.allocated_extents / pool.capacity_extents


def check_exclusivity(tables, extent_size=None):
    """Raise OverlapViolation if any two mapped extents share physical blocks."""
    spans: dict[str, list[tuple[int, int, object]]] = {}
    for t in tables:
        size = extent_size or t.extent_size_blocks
        for idx, loc in enumerate(t.locations):
            if loc is not None:
                spans.setdefault(loc.subsystem_id, []).append(
                    (loc.device_lba, loc.device_lba + size, (t.volume_id, idx)))
    for sid, items in spans.items():
        items.sort()
        for (a0, a1, who_a), (b0, b1, who_b) in zip(items, items[1:]):
            if b0 < a1:
                raise OverlapViolation(f"{who_a} and {who_b} overlap on {sid} at {b0}")
