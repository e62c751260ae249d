import numpy as np
import pytest

from hugesim.errors import PartialWindow
from hugesim.fault import FaultHandler
from hugesim.kernel import Kernel
from hugesim.physmem import MOVABLE, UNMOVABLE
from hugesim.promotion import LOG_HEADER, Khugepaged, describe_window, promote_range
from hugesim.sizes import GB, MB, REGION_FRAMES, PageSize

W = GB >> 12  # vpn of the 1GB window at VA 1GB


def _tokens(k, pid, vpn, n):
    pf = k.space(pid).window_pfns(vpn, n)
    assert np.all(pf >= 0)
    return k.phys.content[pf].copy()


def _map_2m_window(k, pid=1):
    s = k.create_process(pid)
    s.reserve_area(GB, GB)
    fh = FaultHandler(k, sizes=(PageSize.LARGE_2M,))
    for i in range(512):
        fh.handle_fault(pid, GB + i * 2 * MB)
    return s


def _map_4k_scattered(k, pid, va, npages, rng):
    s = k.space(pid)
    frames = k.phys.alloc_frames(npages)
    # scramble the frame order so nothing is contiguous
    s.map_small_bulk((va >> 12) + np.arange(npages), rng.permutation(frames))


def test_2m_window_promoted_to_1g_with_free_block():
    k = Kernel.with_memory(2 * GB)
    s = _map_2m_window(k)
    before = _tokens(k, 1, W, 1 << 18)
    kh = Khugepaged(k)
    recs = kh.step()
    assert len(recs) == 1
    r = recs[0]
    assert (r.from_size, r.to_size, r.bytes_copied, r.mechanism) == ("2MB", "1GB", GB, "buddy")
    assert W in s.huge and not s.large
    assert np.array_equal(_tokens(k, 1, W, 1 << 18), before)
    # the 512 old 2MB blocks coalesced back into a free 1GB region
    assert k.phys.free_block_count(18) == 1
    k.check()


def test_smart_compaction_supplies_the_block():
    k = Kernel.with_memory(3 * GB)
    # a stray frame in each region leaves no free 1GB block
    for r in range(3):
        k.phys.claim((r + 1) * REGION_FRAMES - 1, 0, MOVABLE)
    s = k.create_process(1)
    s.reserve_area(GB, GB)
    _map_4k_scattered(k, 1, GB, 1 << 18, np.random.default_rng(0))
    assert k.phys.free_block_count(18) == 0
    before = _tokens(k, 1, W, 1 << 18)
    kh = Khugepaged(k)
    kh.step()
    assert kh.stats.promotions_1g == 1
    assert kh.log[0].mechanism == "smart_compaction"
    assert np.array_equal(_tokens(k, 1, W, 1 << 18), before)
    k.check()


def test_failed_compaction_falls_back_to_2m():
    k = Kernel.with_memory(2 * GB)
    for r in range(2):
        k.phys.claim(r * REGION_FRAMES + 3, 0, UNMOVABLE)
    s = k.create_process(1)
    s.reserve_area(0, GB)
    fh = FaultHandler(k, sizes=())
    fh.handle_fault(1, 0)
    fh.fault_small_run(1, np.arange(1, 512))
    _map_4k_scattered(k, 1, 2 * MB, (1 << 18) - 512, np.random.default_rng(1))
    kh = Khugepaged(k, compaction_2m=None)
    kh.step()
    assert kh.stats.attempts_1g == 1 and kh.stats.failures_1g == 1
    assert kh.stats.promotions_1g == 0
    assert kh.stats.promotions_2m > 0
    assert all(r.to_size == "2MB" for r in kh.log)
    assert all(r.from_size == "4KB" and r.bytes_copied == 2 * MB for r in kh.log)
    k.check()


def test_token_offsets_preserved_4k_to_2m():
    k = Kernel.with_memory(GB)
    s = k.create_process(1)
    s.reserve_area(0, 2 * MB)
    _map_4k_scattered(k, 1, 0, 512, np.random.default_rng(2))
    before = _tokens(k, 1, 0, 512)
    block = k.phys.alloc_block(9)
    assert promote_range(k, 1, 0, PageSize.LARGE_2M, block) == 2 * MB
    assert s.translate(7) == (block + 7, PageSize.LARGE_2M)
    assert np.array_equal(k.phys.content[block:block + 512], before)
    k.check()


def test_promote_already_huge_is_noop():
    k = Kernel.with_memory(2 * GB)
    s = k.create_process(1)
    s.reserve_area(0, GB)
    FaultHandler(k).handle_fault(1, 0)
    block = k.phys.alloc_block(18)
    tokens = k.phys.content.copy()
    assert promote_range(k, 1, 0, PageSize.HUGE_1G, block) == 0
    assert promote_range(k, 1, 512, PageSize.LARGE_2M, block) == 0
    assert np.array_equal(tokens, k.phys.content)


def test_hole_raises_partial_window():
    k = Kernel.with_memory(GB)
    s = k.create_process(1)
    s.reserve_area(0, 2 * MB)
    _map_4k_scattered(k, 1, 0, 512, np.random.default_rng(3))
    s.unmap_pages(100, 1)
    block = k.phys.alloc_block(9)
    with pytest.raises(PartialWindow):
        promote_range(k, 1, 0, PageSize.LARGE_2M, block)
    assert s.translate(101) is not None


def test_budget_and_round_robin():
    k = Kernel.with_memory(8 * GB)
    for pid in (1, 2):
        s = k.create_process(pid)
        s.reserve_area(pid * 4 * GB, 2 * GB)
    k.create_process(0, thp_eligible=False)
    kh = Khugepaged(k, budget=1)
    kh.step()
    kh.step()
    kh.step()
    assert kh.stats.windows_examined == 3
    assert kh._last_pid == 1
    # pid 1 stopped after its last window; the next visit wraps to 0
    assert kh.scan_pos[1] == (6 * GB) >> 12 and kh.scan_pos[2] == ((8 * GB) >> 12) + (1 << 18)
    kh.step()
    kh.step()
    assert kh.scan_pos[1] == 0


def test_describe_and_header():
    k = Kernel.with_memory(2 * GB)
    s = _map_2m_window(k)
    assert describe_window(s, W, 1 << 18) == "2MB"
    s.demote(W)
    assert describe_window(s, W, 1 << 18) == "mixed"
    assert describe_window(s, W + (1 << 18), 1024) == "none"
    assert LOG_HEADER.split(",")[2] == "vpn"
