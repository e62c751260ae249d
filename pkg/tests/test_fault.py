import numpy as np
import pytest

from hugesim.errors import NotReserved, OutOfMemory, SimError
from hugesim.fault import FaultHandler, LatencyConstants, ZeroPool
from hugesim.kernel import Kernel
from hugesim.physmem import UNMOVABLE
from hugesim.sizes import GB, MB, PageSize


def _setup(mem=2 * GB, area=(GB, GB)):
    k = Kernel.with_memory(mem)
    s = k.create_process(1)
    s.reserve_area(*area)
    return k, s


def test_pooled_1g_fault_is_async():
    k, s = _setup()
    pool = ZeroPool(k.phys, capacity=2)
    assert pool.tick() == 1
    fh = FaultHandler(k, zero_pool=pool)
    out = fh.handle_fault(1, GB + 12345 * 4096)
    assert out.mapping.size == PageSize.HUGE_1G and out.zeroed
    assert out.latency_ns == 2_700_000
    assert s.translate((GB >> 12) + 5)[1] == PageSize.HUGE_1G
    k.check()


def test_raw_1g_fault_is_sync():
    k, s = _setup()
    fh = FaultHandler(k)
    out = fh.handle_fault(1, GB)
    assert out.mapping.size == PageSize.HUGE_1G and not out.zeroed
    assert fh.stats.latency_ns == 400_000_000


def test_1g_failure_falls_back_to_2m():
    k, s = _setup(mem=GB)
    k.phys.alloc_block(0, UNMOVABLE)
    fh = FaultHandler(k)
    out = fh.handle_fault(1, GB + 3 * MB)
    assert out.mapping.size == PageSize.LARGE_2M
    assert out.mapping.vpn == (GB + 2 * MB) >> 12
    assert out.latency_ns == 850_000
    assert fh.stats.attempts_1g == 1 and fh.stats.failures_1g == 1


def test_small_area_gets_4k():
    k, s = _setup(area=(GB, MB))
    fh = FaultHandler(k)
    out = fh.handle_fault(1, GB + 4096)
    assert out.mapping.size == PageSize.BASE_4K and out.latency_ns == 5_000
    assert fh.stats.attempts_1g == 0


def test_partly_mapped_window_drops_to_smaller_size():
    k, s = _setup()
    fh = FaultHandler(k)
    fh.handle_fault(1, GB)
    s2 = k.create_process(2)
    s2.reserve_area(0, GB)
    fh.handle_fault(2, 0)
    s2.unmap_pages(1000, 1)
    out = fh.handle_fault(2, 1000 * 4096)
    assert out.mapping.size == PageSize.BASE_4K
    k.check()


def test_fault_errors():
    k, s = _setup(mem=GB, area=(0, 8 * MB))
    fh = FaultHandler(k, sizes=())
    with pytest.raises(NotReserved):
        fh.handle_fault(1, 16 * MB)
    fh.handle_fault(1, 0)
    with pytest.raises(SimError):
        fh.handle_fault(1, 0)
    k.phys.claim_frames(np.flatnonzero(k.phys.state == 0))
    with pytest.raises(OutOfMemory):
        fh.handle_fault(1, 4096)


def test_small_run_matches_single_faults():
    vpns = [7, 3, 100, 511, 4]
    ka, sa = _setup(mem=GB, area=(0, 4 * MB))
    kb, sb = _setup(mem=GB, area=(0, 4 * MB))
    fa, fb = FaultHandler(ka, sizes=()), FaultHandler(kb, sizes=())
    fa.handle_fault(1, 0)
    fb.handle_fault(1, 0)
    for v in vpns:
        fa.handle_fault(1, v << 12)
    lat = fb.fault_small_run(1, vpns)
    assert lat == 5 * 5_000
    assert list(sa.mappings()) == list(sb.mappings())
    assert np.array_equal(ka.phys.content, kb.phys.content)
    assert fa.stats == fb.stats


def test_zero_pool_empty_memory():
    k = Kernel.with_memory(GB)
    k.phys.alloc_block(0)
    assert ZeroPool(k.phys).tick() == 0


def test_zero_pool_capacity_bound():
    k = Kernel.with_memory(5 * GB)
    pool = ZeroPool(k.phys, capacity=2, fill_rate=1)
    for _ in range(3):
        pool.tick()
    assert len(pool) == 2


def test_zero_pool_refills_after_take():
    k = Kernel.with_memory(5 * GB)
    pool = ZeroPool(k.phys, capacity=2, fill_rate=1)
    pool.tick()
    pool.tick()
    base = pool.take()
    assert base == 0 and len(pool) == 1
    assert pool.tick() == 1 and len(pool) == 2
    assert 0 not in k.phys.zeroed


def test_allocation_drops_zeroed_flag():
    k = Kernel.with_memory(GB)
    pool = ZeroPool(k.phys)
    pool.tick()
    k.phys.alloc_block(0)
    assert len(pool) == 0
    k.phys.check()


def test_latency_validation():
    with pytest.raises(ValueError):
        LatencyConstants(fault_1g_async=500_000_000)
    with pytest.raises(ValueError):
        LatencyConstants(fault_4k=0)
