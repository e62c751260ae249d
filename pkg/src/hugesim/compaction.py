"""Sequential-scan compaction and counter-driven smart compaction.

Both engines move frame contents through Kernel.migrate, so mappings follow
the data and every virtual page keeps its content token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CompactionFailed
from .kernel import Kernel
from .physmem import FREE, MOVABLE, UNMOVABLE
from .sizes import FRAME_BYTES, LEAF_ORDER, MAX_ORDER, REGION_FRAMES, REGION_ORDER

NORMAL = "normal"
SMART = "smart"

REPORT_HEADER = "engine,success,frames_copied,wasted_frames,regions_scanned"
_SCAN_CHUNK = 1 << 16


@dataclass
class CompactionReport:
    engine: str
    order: int
    success: bool = False
    freed_block: tuple[int, int] | None = None
    frames_copied: int = 0
    wasted_frames: int = 0
    regions_scanned: int = 0

    @property
    def bytes_copied(self) -> int:
        return self.frames_copied * FRAME_BYTES

    def csv_row(self) -> str:
        return (f"{self.engine},{int(self.success)},{self.frames_copied},"
                f"{self.wasted_frames},{self.regions_scanned}")


@dataclass
class ScanCursors:
    """Persistent scanner positions for normal compaction (frame numbers)."""

    source: int = 0
    target: int | None = None  # None means "top of memory"

    def copy(self) -> "ScanCursors":
        return ScanCursors(self.source, self.target)


def _existing_block(phys, order, engine):
    for k in range(order, MAX_ORDER + 1):
        if phys.free_block_count(k):
            base = phys.free_blocks(k)[0]
            return CompactionReport(engine, order, True, (base, order))
    return None


def _take_targets(phys, cursors: ScanCursors, n: int, lo: int, hi: int):
    """Free frames outside [lo, hi), highest first, descending from the
    target cursor and wrapping to the top of memory."""
    inside = int(np.count_nonzero(phys.state[lo:hi] == FREE))
    if int(phys.free_count.sum()) - inside < n:
        return None
    top = phys.nframes if cursors.target is None else cursors.target
    parts, got = [], 0
    for end, start in ((top, 0), (phys.nframes, top)):
        pos = end
        while pos > start and got < n:
            s = max(start, pos - _SCAN_CHUNK)
            seg = s + np.flatnonzero(phys.state[s:pos] == FREE)
            seg = seg[(seg < lo) | (seg >= hi)][::-1][:n - got]
            parts.append(seg)
            got += int(seg.size)
            pos = s
    dst = np.concatenate(parts)
    cursors.target = int(dst[-1]) if dst[-1] > 0 else None
    return dst


def normal_compact(kernel: Kernel, order: int, cursors: ScanCursors | None = None) -> CompactionReport:
    """Linux-style compaction for one free block of ``order``.

    Candidate windows are order-aligned and visited in ascending address
    order from the source cursor. An unmovable frame aborts the window and
    the copies already made for it count as wasted."""
    phys = kernel.phys
    cursors = cursors if cursors is not None else ScanCursors()
    found = _existing_block(phys, order, NORMAL)
    if found is not None:
        return found
    report = CompactionReport(NORMAL, order)
    span = 1 << order
    nwin = phys.nframes >> order
    start = (cursors.source % phys.nframes) >> order
    for i in range(nwin):
        w = (start + i) % nwin
        lo, hi = w << order, (w << order) + span
        report.regions_scanned += 1
        if np.any(phys.alloc_order[lo:hi] >= order):
            continue
        st = phys.state[lo:hi]
        unmov = np.flatnonzero(st == UNMOVABLE)
        limit = int(unmov[0]) if unmov.size else span
        src = lo + np.flatnonzero(st[:limit] == MOVABLE)
        if src.size:
            dst = _take_targets(phys, cursors, src.size, lo, hi)
            if dst is None:
                cursors.source = lo
                raise CompactionFailed("free scanner exhausted", report)
            kernel.migrate(src, dst)
            report.frames_copied += int(src.size)
        if unmov.size:
            report.wasted_frames += int(src.size)
            continue
        cursors.source = hi % phys.nframes
        report.success = True
        report.freed_block = (lo, order)
        return report
    raise CompactionFailed("no window could be freed", report)


@dataclass
class SmartSelection:
    source: int
    targets: list[int] = field(default_factory=list)


def select_smart(phys) -> SmartSelection | None:
    """Pick the source region (most free frames, no unmovable frames, not
    already free) and the target regions (fewest free frames first)."""
    free = phys.free_count
    heads = phys.alloc_order[::REGION_FRAMES] >= MAX_ORDER
    eligible = (phys.unmovable_count == 0) & (free < REGION_FRAMES) & ~heads
    if not np.any(eligible):
        return None
    masked = np.where(eligible, free, -1)
    source = int(np.argmax(masked))
    others = [r for r in range(phys.nregions) if r != source and free[r] > 0]
    others.sort(key=lambda r: (int(free[r]), r))
    return SmartSelection(source, others)


def smart_compact(kernel: Kernel, order: int = MAX_ORDER) -> CompactionReport:
    """Free the cheapest clean 1GB region by packing its frames into the
    fullest regions. Fails atomically (nothing copied) when no region is
    eligible or the targets cannot absorb the source."""
    if order != MAX_ORDER:
        raise ValueError("smart compaction only builds 1GB blocks")
    phys = kernel.phys
    found = _existing_block(phys, order, SMART)
    if found is not None:
        return found
    report = CompactionReport(SMART, order)
    sel = select_smart(phys)
    if sel is None:
        raise CompactionFailed("every candidate region holds unmovable frames", report)
    base = sel.source << REGION_ORDER
    src = base + np.flatnonzero(phys.state[base:base + REGION_FRAMES] != FREE)
    need = int(src.size)
    capacity = int(sum(int(phys.free_count[r]) for r in sel.targets))
    if capacity < need:
        raise CompactionFailed("not enough free frames in target regions", report)
    before = phys.free_count.copy()
    # 2MB allocations move whole into free aligned 2MB slots, fullest
    # target regions first; what does not fit moves frame by frame
    ao = phys.alloc_order[base:base + REGION_FRAMES]
    heads = (base + np.flatnonzero(ao == LEAF_ORDER))[::1 << LEAF_ORDER].tolist()
    if heads:
        slots = []
        for r in sel.targets:
            for k in range(LEAF_ORDER, MAX_ORDER):
                for b in phys.region_free_blocks(r, k):
                    slots.extend(range(b, b + (1 << k), 1 << LEAF_ORDER))
            if len(slots) >= len(heads):
                break
        for h, dst in zip(heads, slots):
            kernel.migrate_block(h, dst, LEAF_ORDER)
    src = base + np.flatnonzero(phys.state[base:base + REGION_FRAMES] != FREE)
    dst_parts = []
    got = 0
    for r in sel.targets:
        if got >= src.size:
            break
        rb = r << REGION_ORDER
        free = rb + np.flatnonzero(phys.state[rb:rb + REGION_FRAMES] == FREE)
        take = free[:src.size - got]
        dst_parts.append(take)
        got += int(take.size)
    dst = np.concatenate(dst_parts) if dst_parts else np.zeros(0, dtype=np.int64)
    kernel.migrate(src, dst)
    used = int(np.count_nonzero(phys.free_count[sel.targets] != before[sel.targets])) if sel.targets else 0
    report.frames_copied = need
    report.regions_scanned = 1 + used
    report.success = True
    report.freed_block = (base, MAX_ORDER)
    return report
