import numpy as np
import pytest

from sanvirt import metadata as md
from sanvirt.errors import (CorruptSnapshot, DuplicateId, OutOfRange, PoolExhausted,
                            Unauthorized, UnknownPool, UnknownVolume)
from sanvirt.extent import StripeLayout, check_exclusivity, resolve
from sanvirt.metadata import MetadataStore

ESZ = 4


def store_with(n=2, extents=1000):
    s = MetadataStore(ESZ)
    for i in range(n):
        md.register_subsystem(s, f"S{i + 1}", extents * ESZ)
    return s


def test_register_subsystem():
    s = store_with(1)
    assert s.pool("default").capacity_extents == 1000
    with pytest.raises(DuplicateId):
        s.register_subsystem("S1", 1000 * ESZ)
    with pytest.raises(UnknownPool):
        s.register_subsystem("S9", 10, pool_id="nope")


def test_four_subsystems_pool_and_span():
    s = store_with(4)
    assert s.capacity_extents == 4000
    vid = md.create_virtual_volume(s, "default", 3500 * ESZ, md.FULL)
    subs = {loc.subsystem_id for loc in s.table(vid).locations}
    assert len(subs) >= 2


def test_thin_overcommit_and_full_exhaustion():
    s = store_with(1, extents=100)
    vid = s.create_virtual_volume("default", 10 * 100 * ESZ)
    assert s.allocated_extents == 0
    assert s.table(vid).epoch == 0
    with pytest.raises(PoolExhausted):
        s.create_virtual_volume("default", 101 * ESZ, md.FULL)
    assert s.allocated_extents == 0
    with pytest.raises(UnknownPool):
        s.create_virtual_volume("x", 8)


def test_striped_volume_is_balanced():
    s = store_with(4, extents=100)
    layout = StripeLayout(("S1", "S2", "S3", "S4"), ESZ)
    vid = s.create_virtual_volume("default", 37 * ESZ, md.STRIPED, layout)
    counts = {}
    for loc in s.table(vid).locations:
        counts[loc.subsystem_id] = counts.get(loc.subsystem_id, 0) + 1
    assert max(counts.values()) - min(counts.values()) <= 1
    # brute force: extent i lives on device (i mod 4)
    assert [loc.subsystem_id for loc in s.table(vid).locations] == \
        [f"S{i % 4 + 1}" for i in range(37)]
    with pytest.raises(ValueError):
        s.create_virtual_volume("default", 8, md.STRIPED, StripeLayout(("S1",), 3))


def test_resolve_allocates_on_write_and_zero_fills_reads():
    s = store_with()
    vid = s.create_virtual_volume("default", 64, holders=["H1"])
    g = md.handle_resolve(s, vid, 0, 8, "H1", for_write=True)
    assert g.epoch == 0 and not g.zero_fill
    assert sorted(g.allocated) == [0, 1]
    r = s.handle_resolve(vid, 16, 4, "H1")
    assert r.zero_fill and r.allocated == [] and s.allocated_extents == 2
    with pytest.raises(Unauthorized):
        s.handle_resolve(vid, 0, 1, "H2")
    with pytest.raises(OutOfRange):
        s.handle_resolve(vid, 60, 8, "H1")
    with pytest.raises(UnknownVolume):
        s.handle_resolve(99, 0, 1, "H1")


def test_grants_agree_with_extent_resolve():
    rng = np.random.default_rng(3)
    s = store_with(3, extents=200)
    vid = s.create_virtual_volume("default", 400, holders=["H1"])
    for _ in range(1000):
        a = int(rng.integers(0, 400))
        n = int(rng.integers(1, 400 - a + 1))
        w = bool(rng.integers(2))
        g = s.handle_resolve(vid, a, n, "H1", for_write=w)
        t = s.table(vid)
        assert g.epoch == t.epoch
        assert g.segments == resolve(t, a, n, allow_unallocated=True)
        assert s.grants_issued[(vid, "H1")] <= t.epoch
        if rng.random() < 0.05 and t.mapped_indices():
            idx = int(rng.choice(t.mapped_indices()))
            s.migrate_and_invalidate(vid, idx, s.reserve_target(vid, idx))
        assert s.allocated_extents + s.free_extents == s.capacity_extents


def test_migrate_and_invalidate_holders():
    s = store_with()
    vid = s.create_virtual_volume("default", 16, md.FULL)
    inv, holders = md.migrate_and_invalidate(s, vid, 0, s.reserve_target(vid, 0))
    assert inv.new_epoch == 1 and holders == []
    s.authorize(vid, "H1")
    s.handle_resolve(vid, 0, 4, "H1")
    assert s.stale_holders(vid) == []
    inv, holders = s.migrate_and_invalidate(vid, 1, s.reserve_target(vid, 1))
    assert (inv.new_epoch, holders) == (2, ["H1"])
    assert s.stale_holders(vid) == []


def test_migration_moves_to_other_subsystem():
    s = store_with()
    vid = s.create_virtual_volume("default", 16, md.FULL)
    old = s.table(vid).locations[2]
    new = s.reserve_target(vid, 2)
    assert new.subsystem_id != old.subsystem_id
    s.migrate_and_invalidate(vid, 2, new)
    check_exclusivity(s.tables.values())


def _busy_store():
    s = store_with(3, extents=50)
    a = s.create_virtual_volume("default", 100, holders=["H1"])
    b = s.create_virtual_volume("default", 40, md.FULL, holders=["H2"])
    s.create_virtual_volume("default", 48, md.STRIPED, StripeLayout(("S1", "S3"), ESZ))
    rng = np.random.default_rng(9)
    for _ in range(60):
        st = int(rng.integers(0, 96))
        s.handle_resolve(a, st, 4, "H1", for_write=True)
    s.migrate_and_invalidate(b, 3, s.reserve_target(b, 3))
    s.reserve_target(a, s.table(a).mapped_indices()[0])
    return s


def test_snapshot_round_trip():
    s = _busy_store()
    snap = md.snapshot(s)
    r = md.restore(snap)
    assert r.snapshot() == snap
    rng = np.random.default_rng(1)
    for _ in range(500):
        vid = int(rng.integers(0, 2))
        holder = ["H1", "H2"][vid]
        size = s.table(vid).size_blocks
        a = int(rng.integers(0, size))
        n = int(rng.integers(1, size - a + 1))
        assert r.handle_resolve(vid, a, n, holder) == s.handle_resolve(vid, a, n, holder)


def test_snapshot_corruption_detected():
    snap = bytearray(_busy_store().snapshot())
    for pos in (0, 12, len(snap) // 2, len(snap) - 1):
        bad = bytearray(snap)
        bad[pos] ^= 0x40
        with pytest.raises(CorruptSnapshot):
            MetadataStore.restore(bytes(bad))
    with pytest.raises(CorruptSnapshot):
        MetadataStore.restore(bytes(snap[:-3]))


def test_restored_store_continues_identically():
    # run a mutation script on the original and on a mid-way restore; the
    # tail of the grant log must match exactly
    def script(s, rng, log):
        for _ in range(200):
            vid = 0
            a = int(rng.integers(0, 96))
            if rng.random() < 0.1:
                t = s.table(vid)
                idx = t.mapped_indices()[int(rng.integers(len(t.mapped_indices())))]
                inv, holders = s.migrate_and_invalidate(vid, idx, s.reserve_target(vid, idx))
                log.append(("inv", inv.new_epoch, tuple(holders)))
            else:
                g = s.handle_resolve(vid, a, 4, "H1", for_write=True)
                log.append(("grant", g.epoch, tuple(g.segments), tuple(g.allocated)))

    s = _busy_store()
    head = []
    script(s, np.random.default_rng(4), head)
    snap = s.snapshot()
    tail_a, tail_b = [], []
    script(s, np.random.default_rng(5), tail_a)
    script(MetadataStore.restore(snap), np.random.default_rng(5), tail_b)
    assert tail_a == tail_b


def test_central_pool_conservation_and_unique_ids():
    s = _busy_store()
    assert s.allocated_extents + s.free_extents == s.capacity_extents
    with pytest.raises(DuplicateId):
        s.create_virtual_volume("default", 8, volume_id=0)
    for t in s.tables.values():
        for loc in t.locations:
            assert loc is None or loc.subsystem_id in s.subsystems
