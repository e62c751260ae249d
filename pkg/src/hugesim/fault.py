"""Page-fault size policy with asynchronous zero-fill of free 1GB blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .addrspace import Mapping
from .errors import NoContiguity, NotReserved, OutOfMemory, SimError
from .kernel import Kernel
from .physmem import MOVABLE, PhysicalMemory
from .sizes import LEAF_ORDER, LEAF_PAGES, MAX_ORDER, PageSize, align_down


@dataclass(frozen=True)
class LatencyConstants:
    """Fault latencies in nanoseconds."""

    fault_1g_sync: int = 400_000_000
    fault_1g_async: int = 2_700_000
    fault_2m: int = 850_000
    fault_4k: int = 5_000

    def __post_init__(self):
        for name in ("fault_1g_sync", "fault_1g_async", "fault_2m", "fault_4k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.fault_1g_async >= self.fault_1g_sync:
            raise ValueError("async 1GB fault must be cheaper than the synchronous one")

    def for_size(self, size: PageSize, zeroed: bool = False) -> int:
        if size == PageSize.HUGE_1G:
            return self.fault_1g_async if zeroed else self.fault_1g_sync
        if size == PageSize.LARGE_2M:
            return self.fault_2m
        return self.fault_4k


class ZeroPool:
    """Background zeroing of free 1GB blocks.

    The pooled blocks stay free in the buddy allocator; the flag lives in
    ``PhysicalMemory.zeroed`` and is dropped as soon as any frame of the
    block is allocated."""

    def __init__(self, phys: PhysicalMemory, capacity: int = 4, fill_rate: int = 1, enabled: bool = True):
        if capacity < 0 or fill_rate < 0:
            raise ValueError("capacity and fill rate must be non-negative")
        self.phys = phys
        self.capacity = capacity
        self.fill_rate = fill_rate
        self.enabled = enabled

    def __len__(self) -> int:
        return len(self.phys.zeroed)

    def tick(self) -> int:
        if not self.enabled:
            return 0
        room = min(self.fill_rate, self.capacity - len(self.phys.zeroed))
        if room <= 0:
            return 0
        fresh = [b for b in self.phys.free_blocks(MAX_ORDER) if b not in self.phys.zeroed][:room]
        self.phys.zeroed.update(fresh)
        return len(fresh)

    def take(self) -> int | None:
        """Allocate the lowest pre-zeroed block, or None."""
        if not self.enabled or not self.phys.zeroed:
            return None
        base = min(self.phys.zeroed)
        self.phys.claim(base, MAX_ORDER, MOVABLE)
        return base


@dataclass
class FaultStats:
    faults: int = 0
    faults_4k: int = 0
    faults_2m: int = 0
    faults_1g: int = 0
    attempts_1g: int = 0
    failures_1g: int = 0
    zeroed_1g: int = 0
    latency_ns: int = 0


@dataclass
class FaultOutcome:
    mapping: Mapping
    latency_ns: int
    attempted_1g: bool = False
    zeroed: bool = False


class FaultHandler:
    def __init__(self, kernel: Kernel, sizes=(PageSize.HUGE_1G, PageSize.LARGE_2M),
                 latency: LatencyConstants | None = None, zero_pool: ZeroPool | None = None):
        self.kernel = kernel
        self.sizes = frozenset(PageSize(s) for s in sizes)
        self.latency = latency or LatencyConstants()
        self.zero_pool = zero_pool
        self.stats = FaultStats()

    def handle_fault(self, pid: int, va: int) -> FaultOutcome:
        space = self.kernel.space(pid)
        phys = self.kernel.phys
        vpn = va >> 12
        if not space.covered(vpn, vpn + 1):
            raise NotReserved(f"fault at unreserved address {va:#x}")
        if space.translate(vpn) is not None:
            raise SimError(f"address {va:#x} is already mapped")
        st = self.stats
        st.faults += 1
        attempted = False

        if PageSize.HUGE_1G in self.sizes:
            w = align_down(vpn, MAX_ORDER)
            n = PageSize.HUGE_1G.frames
            if space.covered(w, w + n) and not space.any_mapped(w, n):
                attempted = True
                st.attempts_1g += 1
                zeroed = False
                base = self.zero_pool.take() if self.zero_pool is not None else None
                if base is not None:
                    zeroed = True
                else:
                    try:
                        base = phys.alloc_block(MAX_ORDER)
                    except NoContiguity:
                        st.failures_1g += 1
                if base is not None:
                    space.map_range(w, PageSize.HUGE_1G, base)
                    lat = self.latency.for_size(PageSize.HUGE_1G, zeroed)
                    st.faults_1g += 1
                    st.zeroed_1g += zeroed
                    st.latency_ns += lat
                    return FaultOutcome(Mapping(w, base, PageSize.HUGE_1G), lat, True, zeroed)

        if PageSize.LARGE_2M in self.sizes:
            w = align_down(vpn, 9)
            n = PageSize.LARGE_2M.frames
            if space.covered(w, w + n) and not space.any_mapped(w, n):
                try:
                    base = phys.alloc_block(9)
                except NoContiguity:
                    base = None
                if base is not None:
                    space.map_range(w, PageSize.LARGE_2M, base)
                    lat = self.latency.fault_2m
                    st.faults_2m += 1
                    st.latency_ns += lat
                    return FaultOutcome(Mapping(w, base, PageSize.LARGE_2M), lat, attempted)

        try:
            base = phys.alloc_block(0)
        except NoContiguity:
            raise OutOfMemory(f"no free frame for fault at {va:#x}") from None
        space.map_range(vpn, PageSize.BASE_4K, base)
        lat = self.latency.fault_4k
        st.faults_4k += 1
        st.latency_ns += lat
        return FaultOutcome(Mapping(vpn, base, PageSize.BASE_4K), lat, attempted)

    def fault_small_run(self, pid: int, vpns) -> int:
        """Fault in unmapped pages of one 2MB chunk that already holds 4KB
        mappings, in the given order. Each page would take the 4KB path on
        its own (its chunk and 1GB window are already partly mapped), so the
        frames are allocated in one pass with the same outcome. Returns the
        latency charged."""
        vpns = np.asarray(vpns, dtype=np.int64)
        k = int(vpns.size)
        if k == 0:
            return 0
        space = self.kernel.space(pid)
        c = int(vpns[0]) >> LEAF_ORDER
        leaf = space.leaves.get(c)
        if leaf is None or np.any(vpns >> LEAF_ORDER != c):
            raise SimError("fault_small_run needs pages of one partly mapped 2MB chunk")
        if np.any(leaf[vpns & (LEAF_PAGES - 1)] >= 0) or np.unique(vpns).size != k:
            raise SimError("fault_small_run on mapped or repeated pages")
        if not space.covered(int(vpns.min()), int(vpns.max()) + 1):
            raise NotReserved("fault at unreserved address")
        phys = self.kernel.phys
        if int(phys.free_count.sum()) < k:
            raise OutOfMemory("not enough free frames")
        frames = phys.alloc_frames(k)
        space.map_small_bulk(vpns, frames)
        lat = k * self.latency.fault_4k
        st = self.stats
        st.faults += k
        st.faults_4k += k
        st.latency_ns += lat
        return lat
