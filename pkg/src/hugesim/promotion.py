"""Background promotion (khugepaged) preferring 1GB and falling back to 2MB."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compaction import (CompactionReport, ScanCursors, normal_compact,
                         smart_compact)
from .errors import CompactionFailed, NoContiguity, PartialWindow
from .kernel import Kernel
from .sizes import FRAME_BYTES, LEAF_ORDER, LEAF_PAGES, MAX_ORDER, PageSize

LOG_HEADER = "time,process,vpn,from_size,to_size,bytes_copied,mechanism"
HUGE_PAGES = 1 << MAX_ORDER


@dataclass
class PromotionRecord:
    time: int
    pid: int
    vpn: int
    from_size: str
    to_size: str
    bytes_copied: int
    mechanism: str

    def csv_row(self) -> str:
        return (f"{self.time},{self.pid},{self.vpn:#x},{self.from_size},{self.to_size},"
                f"{self.bytes_copied},{self.mechanism}")


def describe_window(space, vpn: int, npages: int) -> str:
    """Label of the page sizes currently mapping a window."""
    sizes = set()
    for c in range(vpn >> LEAF_ORDER, (vpn + npages) >> LEAF_ORDER):
        if (c << LEAF_ORDER) in space.large:
            sizes.add("2MB")
        elif c in space.leaves:
            sizes.add("4KB")
    if npages < LEAF_PAGES:
        sizes.add("4KB")
    if len(sizes) == 1:
        return sizes.pop()
    return "mixed" if sizes else "none"


def copy_mover(kernel: Kernel):
    def move(src, dst):
        kernel.phys.copy_frames(src, dst)
    return move


def promote_range(kernel: Kernel, pid: int, vpn: int, size: PageSize, block: int, mover=None) -> int:
    """Remap [vpn, vpn + size) onto ``block`` (an allocated, unmapped block of
    the target order), copying each page's contents to the matching offset.
    Returns bytes copied; 0 when the window is already mapped at ``size``
    or larger, in which case ``block`` is left untouched."""
    size = PageSize(size)
    space = kernel.space(pid)
    n = size.frames
    m = space.mapping_at(vpn)
    if m is not None and m.size >= size:
        return 0
    old = space.window_pfns(vpn, n)
    if np.any(old < 0):
        raise PartialWindow(f"window {vpn:#x} has unmapped pages")
    mover = mover or copy_mover(kernel)
    blocks, frames = space.detach(vpn, n)
    dst = np.arange(block, block + n, dtype=np.int64)
    mover(old, dst)
    phys = kernel.phys
    for pfn, order in blocks:
        phys.free_block(pfn, order)
    phys.release_frames(frames)
    space.map_range(vpn, size, block)
    return n * FRAME_BYTES


@dataclass
class PromotionStats:
    steps: int = 0
    windows_examined: int = 0
    promotions_1g: int = 0
    promotions_2m: int = 0
    attempts_1g: int = 0
    failures_1g: int = 0
    bytes_copied: int = 0


class Khugepaged:
    """Scans one process per step, examining at most ``budget`` 1GB-aligned
    windows, and promotes each window at the best achievable size."""

    def __init__(self, kernel: Kernel, sizes=(PageSize.HUGE_1G, PageSize.LARGE_2M),
                 compaction_1g: str | None = "smart", compaction_2m: str | None = "normal",
                 budget: int = 8, clock=None, copyless=None):
        self.kernel = kernel
        self.sizes = frozenset(PageSize(s) for s in sizes)
        self.compaction_1g = compaction_1g
        self.compaction_2m = compaction_2m
        self.budget = budget
        self.clock = clock or (lambda: 0)
        # optional callable(space, vpn, block) -> (bytes_copied, mechanism) for
        # windows fully mapped by 2MB pages
        self.copyless = copyless
        self.cursors = ScanCursors()
        self.scan_pos: dict[int, int] = {}
        self._last_pid = -1
        self.stats = PromotionStats()
        self.log: list[PromotionRecord] = []
        self.compactions: list[CompactionReport] = []

    # -- candidate selection ---------------------------------------------

    def _next_pid(self):
        pids = sorted(p for p, s in self.kernel.spaces.items() if s.thp_eligible)
        if not pids:
            return None
        for p in pids:
            if p > self._last_pid:
                return p
        return pids[0]

    @staticmethod
    def _huge_windows(space):
        seen = []
        for start, length in space.areas:
            lo = (start >> 12) & ~(HUGE_PAGES - 1)
            hi = (start + length) >> 12
            w = lo
            while w < hi:
                if not seen or seen[-1] < w:
                    seen.append(w)
                w += HUGE_PAGES
        return seen

    # -- block supply -----------------------------------------------------

    def _get_block(self, order: int):
        phys = self.kernel.phys
        try:
            return phys.alloc_block(order), "buddy"
        except NoContiguity:
            pass
        engine = self.compaction_1g if order == MAX_ORDER else self.compaction_2m
        if engine is None:
            return None, None
        try:
            if engine == "smart" and order == MAX_ORDER:
                report = smart_compact(self.kernel)
            else:
                report = normal_compact(self.kernel, order, self.cursors)
        except CompactionFailed as exc:
            if exc.report is not None:
                self.compactions.append(exc.report)
            return None, None
        self.compactions.append(report)
        base, _ = report.freed_block
        phys.claim(base, order)
        return base, f"{report.engine}_compaction"

    # -- scanning -----------------------------------------------------------

    def step(self, pid: int | None = None) -> list[PromotionRecord]:
        if pid is None:
            pid = self._next_pid()
            if pid is None:
                return []
        self._last_pid = pid
        space = self.kernel.space(pid)
        self.stats.steps += 1
        pos = self.scan_pos.get(pid, 0)
        done = []
        examined = 0
        wrapped = True
        for w in self._huge_windows(space):
            if w < pos:
                continue
            examined += 1
            self.stats.windows_examined += 1
            done.extend(self._process_window(space, w))
            pos = w + HUGE_PAGES
            if examined >= self.budget:
                wrapped = False
                break
        self.scan_pos[pid] = 0 if wrapped else pos
        return done

    def run_to_fixpoint(self, max_passes: int = 1000) -> list[PromotionRecord]:
        """Repeat full scans of every eligible process until nothing changes."""
        out = []
        for _ in range(max_passes):
            before = len(self.log)
            for pid in sorted(p for p, s in self.kernel.spaces.items() if s.thp_eligible):
                self.scan_pos[pid] = 0
                while True:
                    out.extend(self.step(pid))
                    if self.scan_pos[pid] == 0:
                        break
            if len(self.log) == before:
                break
        return out

    def _record(self, space, vpn, from_size, to_size, nbytes, mech):
        rec = PromotionRecord(self.clock(), space.pid, vpn, from_size, to_size.label, nbytes, mech)
        self.log.append(rec)
        self.stats.bytes_copied += nbytes
        if to_size == PageSize.HUGE_1G:
            self.stats.promotions_1g += 1
        else:
            self.stats.promotions_2m += 1
        return rec

    def _process_window(self, space, w: int) -> list[PromotionRecord]:
        if w in space.huge:
            return []
        out = []
        if PageSize.HUGE_1G in self.sizes and space.covered(w, w + HUGE_PAGES):
            pfns = space.window_pfns(w, HUGE_PAGES)
            if np.all(pfns >= 0):
                self.stats.attempts_1g += 1
                block, mech = self._get_block(MAX_ORDER)
                if block is not None:
                    before = describe_window(space, w, HUGE_PAGES)
                    all_large = before == "2MB"
                    if self.copyless is not None and all_large:
                        nbytes, mech = self.copyless(space, w, block)
                    else:
                        nbytes = promote_range(self.kernel, space.pid, w, PageSize.HUGE_1G, block)
                    out.append(self._record(space, w, before, PageSize.HUGE_1G, nbytes, mech))
                    return out
                self.stats.failures_1g += 1
        if PageSize.LARGE_2M in self.sizes:
            for c in range(w >> LEAF_ORDER, (w + HUGE_PAGES) >> LEAF_ORDER):
                leaf = space.leaves.get(c)
                if leaf is None or not np.all(leaf >= 0):
                    continue
                cb = c << LEAF_ORDER
                if not space.covered(cb, cb + LEAF_PAGES):
                    continue
                block, mech = self._get_block(LEAF_ORDER)
                if block is None:
                    break
                nbytes = promote_range(self.kernel, space.pid, cb, PageSize.LARGE_2M, block)
                out.append(self._record(space, cb, "4KB", PageSize.LARGE_2M, nbytes, mech))
        return out
