import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sanvirt.config import WorkloadSpec
from sanvirt.workload import decode_stamps, generate_workload, stamp_payload

MiB = 1 << 20


def test_same_inputs_same_stream():
    spec = WorkloadSpec("mixed", 8, 8 * MiB)
    a = generate_workload(spec, 3, 1, 10_000)
    assert a == generate_workload(spec, 3, 1, 10_000)
    assert a != generate_workload(spec, 3, 2, 10_000)
    assert a != generate_workload(spec, 4, 1, 10_000)


def test_sequential_write_arithmetic():
    items = generate_workload(WorkloadSpec("sequential_write", 64, 64 * MiB), 0, 0, 1 << 20)
    assert len(items) == 256
    assert [it.start for it in items[:4]] == [0, 64, 128, 192]
    assert all(it.op == "W" and it.length == 64 for it in items)


def test_sequential_wraps_and_last_request_is_short():
    items = generate_workload(WorkloadSpec("sequential_read", 4, 10 * 512), 0, 0, 8, 512)
    assert [(it.start, it.length) for it in items] == [(0, 4), (4, 4), (0, 2)]


def test_mixed_read_share_binomial():
    n = 10_000
    items = generate_workload(WorkloadSpec("mixed", 1, n * 4096, read_fraction=0.7), 42, 0, 1000)
    reads = sum(it.op == "R" for it in items)
    sigma = (n * 0.7 * 0.3) ** 0.5
    assert abs(reads - 0.7 * n) <= 3 * sigma


def test_random_write_uniform_over_volume():
    items = generate_workload(WorkloadSpec("random_write", 1, 20_000 * 512), 1, 0, 100, 512)
    counts = np.bincount([it.start for it in items], minlength=100)
    # chi-square against uniform, 99 dof: 99.9th percentile is about 149
    chi2 = ((counts - 200) ** 2 / 200).sum()
    assert chi2 < 149
    assert all(it.op == "W" for it in items)


@given(st.sampled_from(["sequential_read", "sequential_write", "random_read", "random_write",
                        "mixed"]),
       st.integers(1, 16), st.integers(1, 300), st.integers(16, 400), st.integers(0, 5))
def test_stream_totals_and_bounds(pattern, io, nblocks, vol, host):
    spec = WorkloadSpec(pattern, io, nblocks * 512)
    if io > vol:
        with pytest.raises(ValueError):
            generate_workload(spec, 0, host, vol, 512)
        return
    items = generate_workload(spec, 0, host, vol, 512)
    assert sum(it.length for it in items) == nblocks
    assert all(0 <= it.start and it.start + it.length <= vol for it in items)
    assert len({it.uid for it in items}) == len(items)


def test_stamps_round_trip():
    data = stamp_payload(77, 5, 100, 3, 512)
    assert len(data) == 3 * 512
    uid, vol, vlba = decode_stamps(data, 512)
    assert uid.tolist() == [77] * 3 and vol.tolist() == [5] * 3
    assert vlba.tolist() == [100, 101, 102]
    with pytest.raises(ValueError):
        stamp_payload(1, 1, 0, 1, 100)
