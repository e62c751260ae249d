"""Per-process virtual areas and size-classed mappings.

Mapping tables are split by size class: 1GB and 2MB mappings are dicts keyed
by their base virtual page number; 4KB mappings live in 512-entry leaf arrays
(one per 2MB-aligned chunk), much like the last level of a radix page table.
The reverse map is the pair of per-frame owner arrays in PhysicalMemory.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, NotReserved, OverlapError, SimError
from .physmem import MOVABLE, PhysicalMemory
from .sizes import FRAME_SHIFT, LEAF_ORDER, LEAF_PAGES, PageSize, align_down

_LEAF_MASK = LEAF_PAGES - 1


@dataclass(frozen=True)
class Mapping:
    vpn: int
    pfn: int
    size: PageSize


def _to_pages(start: int, length: int) -> tuple[int, int]:
    if start % 4096 or length % 4096:
        raise AlignmentError("areas must be 4KB aligned")
    if length <= 0:
        raise ValueError("area length must be positive")
    return start >> FRAME_SHIFT, (start + length) >> FRAME_SHIFT


class AddressSpace:
    def __init__(self, pid: int, phys: PhysicalMemory, thp_eligible: bool = True):
        self.pid = pid
        self.phys = phys
        self.thp_eligible = thp_eligible
        # merged, sorted [start_vpn, end_vpn) pairs
        self._starts: list[int] = []
        self._ends: list[int] = []
        self.huge: dict[int, int] = {}
        self.large: dict[int, int] = {}
        self.leaves: dict[int, np.ndarray] = {}
        self.generation = 0

    # -- areas -----------------------------------------------------------

    @property
    def areas(self) -> list[tuple[int, int]]:
        """Reserved areas as (start_address, length_bytes)."""
        return [(s << FRAME_SHIFT, (e - s) << FRAME_SHIFT) for s, e in zip(self._starts, self._ends)]

    def reserved_pages(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))

    def reserve_area(self, start: int, length: int) -> None:
        lo, hi = _to_pages(start, length)
        i = bisect.bisect_right(self._starts, lo)
        if i > 0 and self._ends[i - 1] > lo:
            raise OverlapError(f"area at {start:#x} overlaps an existing area")
        if i < len(self._starts) and self._starts[i] < hi:
            raise OverlapError(f"area at {start:#x} overlaps an existing area")
        # merge with touching neighbours
        if i < len(self._starts) and self._starts[i] == hi:
            hi = self._ends[i]
            del self._starts[i], self._ends[i]
        if i > 0 and self._ends[i - 1] == lo:
            lo = self._starts[i - 1]
            del self._starts[i - 1], self._ends[i - 1]
            i -= 1
        self._starts.insert(i, lo)
        self._ends.insert(i, hi)

    def release_area(self, start: int, length: int) -> None:
        lo, hi = _to_pages(start, length)
        i = bisect.bisect_right(self._starts, lo) - 1
        if i < 0 or self._ends[i] < hi:
            raise NotReserved(f"range {start:#x}+{length:#x} is not reserved")
        self.unmap_pages(lo, hi - lo)
        s, e = self._starts[i], self._ends[i]
        del self._starts[i], self._ends[i]
        if hi < e:
            self._starts.insert(i, hi)
            self._ends.insert(i, e)
        if s < lo:
            self._starts.insert(i, s)
            self._ends.insert(i, lo)

    def covered(self, lo: int, hi: int) -> bool:
        """True if pages [lo, hi) lie inside one reserved area."""
        i = bisect.bisect_right(self._starts, lo) - 1
        return i >= 0 and self._ends[i] >= hi

    def mappable_extents(self, size: PageSize) -> int:
        """Bytes covered by size-aligned, size-long windows inside areas."""
        order = PageSize(size).order
        step = 1 << order
        total = 0
        for s, e in zip(self._starts, self._ends):
            first = -(-s // step)
            last = e // step
            if last > first:
                total += last - first
        return total * PageSize(size).nbytes

    def windows(self, size: PageSize, lo: int = 0):
        """Yield base pages of size-aligned windows inside areas, from ``lo``."""
        step = 1 << PageSize(size).order
        for s, e in zip(self._starts, self._ends):
            if e <= lo:
                continue
            w = -(-max(s, lo) // step) * step
            while w + step <= e:
                yield w
                w += step

    # -- lookups -----------------------------------------------------------

    def translate(self, vpn: int):
        """Return (pfn, size) for the page, or None when unmapped."""
        base = vpn & ~((1 << 18) - 1)
        pfn = self.huge.get(base)
        if pfn is not None:
            return pfn + (vpn - base), PageSize.HUGE_1G
        base = vpn & ~_LEAF_MASK
        pfn = self.large.get(base)
        if pfn is not None:
            return pfn + (vpn - base), PageSize.LARGE_2M
        leaf = self.leaves.get(vpn >> LEAF_ORDER)
        if leaf is not None:
            pfn = int(leaf[vpn & _LEAF_MASK])
            if pfn >= 0:
                return pfn, PageSize.BASE_4K
        return None

    def mapping_at(self, vpn: int):
        """Return the Mapping covering the page, or None."""
        base = align_down(vpn, 18)
        if base in self.huge:
            return Mapping(base, self.huge[base], PageSize.HUGE_1G)
        base = align_down(vpn, LEAF_ORDER)
        if base in self.large:
            return Mapping(base, self.large[base], PageSize.LARGE_2M)
        hit = self.translate(vpn)
        if hit is not None:
            return Mapping(vpn, hit[0], PageSize.BASE_4K)
        return None

    def window_pfns(self, vpn: int, npages: int) -> np.ndarray:
        """Frame number of every 4KB page in [vpn, vpn + npages), -1 if unmapped."""
        out = np.full(npages, -1, dtype=np.int64)
        end = vpn + npages
        pos = vpn
        while pos < end:
            chunk = pos >> LEAF_ORDER
            cbase = chunk << LEAF_ORDER
            stop = min(end, cbase + LEAF_PAGES)
            o0, o1 = pos - vpn, stop - vpn
            hbase = align_down(pos, 18)
            if hbase in self.huge:
                hp = self.huge[hbase]
                hstop = min(end, hbase + (1 << 18))
                out[o0:hstop - vpn] = np.arange(hp + pos - hbase, hp + hstop - hbase, dtype=np.int64)
                pos = hstop
                continue
            if cbase in self.large:
                lp = self.large[cbase]
                out[o0:o1] = np.arange(lp + pos - cbase, lp + stop - cbase, dtype=np.int64)
            else:
                leaf = self.leaves.get(chunk)
                if leaf is not None:
                    out[o0:o1] = leaf[pos - cbase:stop - cbase]
            pos = stop
        return out

    def any_mapped(self, vpn: int, npages: int) -> bool:
        end = vpn + npages
        hb = align_down(vpn, 18)
        while hb < end:
            if hb in self.huge:
                return True
            hb += 1 << 18
        c = vpn >> LEAF_ORDER
        while (c << LEAF_ORDER) < end:
            cb = c << LEAF_ORDER
            if cb in self.large:
                return True
            leaf = self.leaves.get(c)
            if leaf is not None:
                a = max(vpn, cb) - cb
                b = min(end, cb + LEAF_PAGES) - cb
                # leaves are never empty, so a whole-chunk query is a hit
                if b - a == LEAF_PAGES or np.any(leaf[a:b] >= 0):
                    return True
            c += 1
        return False

    def mapped_bytes(self) -> dict[PageSize, int]:
        small = sum(int(np.count_nonzero(leaf >= 0)) for leaf in self.leaves.values())
        return {
            PageSize.BASE_4K: small * PageSize.BASE_4K.nbytes,
            PageSize.LARGE_2M: len(self.large) * PageSize.LARGE_2M.nbytes,
            PageSize.HUGE_1G: len(self.huge) * PageSize.HUGE_1G.nbytes,
        }

    def mappings(self):
        """Iterate every mapping. 4KB entries are enumerated one by one."""
        for v, p in sorted(self.huge.items()):
            yield Mapping(v, p, PageSize.HUGE_1G)
        for v, p in sorted(self.large.items()):
            yield Mapping(v, p, PageSize.LARGE_2M)
        for c in sorted(self.leaves):
            leaf = self.leaves[c]
            for off in np.flatnonzero(leaf >= 0).tolist():
                yield Mapping((c << LEAF_ORDER) + off, int(leaf[off]), PageSize.BASE_4K)

    # -- mutation -----------------------------------------------------------

    def map_range(self, vpn: int, size: PageSize, pfn: int) -> None:
        if size == 0:
            return self._map_small(vpn, pfn)
        size = PageSize(size)
        n = size.frames
        if vpn % n or pfn % n:
            raise AlignmentError(f"vpn/pfn not aligned to {size.label}")
        if not self.covered(vpn, vpn + n):
            raise NotReserved(f"vpn {vpn:#x} is outside reserved areas")
        if self.any_mapped(vpn, n):
            raise OverlapError(f"vpn {vpn:#x} already mapped")
        phys = self.phys
        if pfn + n > phys.nframes:
            raise ValueError("frame out of range")
        sl = slice(pfn, pfn + n)
        if np.any(phys.owner_pid[sl] >= 0):
            raise OverlapError(f"frame {pfn:#x} is already mapped")
        if np.any(phys.state[sl] != MOVABLE) or np.any(phys.alloc_order[sl] != size.order):
            raise SimError(f"frames at {pfn:#x} are not a movable order-{size.order} allocation")
        if size == PageSize.HUGE_1G:
            self.huge[vpn] = pfn
        elif size == PageSize.LARGE_2M:
            self.large[vpn] = pfn
        else:
            leaf = self.leaves.get(vpn >> LEAF_ORDER)
            if leaf is None:
                leaf = self.leaves[vpn >> LEAF_ORDER] = np.full(LEAF_PAGES, -1, dtype=np.int64)
            leaf[vpn & _LEAF_MASK] = pfn
        phys.owner_pid[sl] = self.pid
        phys.owner_vpn[sl] = np.arange(vpn, vpn + n, dtype=np.int64)
        self.generation += 1

    def _map_small(self, vpn: int, pfn: int) -> None:
        if not self.covered(vpn, vpn + 1):
            raise NotReserved(f"vpn {vpn:#x} is outside reserved areas")
        if self.translate(vpn) is not None:
            raise OverlapError(f"vpn {vpn:#x} already mapped")
        phys = self.phys
        if not 0 <= pfn < phys.nframes:
            raise ValueError("frame out of range")
        if phys.owner_pid[pfn] >= 0:
            raise OverlapError(f"frame {pfn:#x} is already mapped")
        if phys.state[pfn] != MOVABLE or phys.alloc_order[pfn] != 0:
            raise SimError(f"frame {pfn:#x} is not a movable order-0 allocation")
        leaf = self.leaves.get(vpn >> LEAF_ORDER)
        if leaf is None:
            leaf = self.leaves[vpn >> LEAF_ORDER] = np.full(LEAF_PAGES, -1, dtype=np.int64)
        leaf[vpn & _LEAF_MASK] = pfn
        phys.owner_pid[pfn] = self.pid
        phys.owner_vpn[pfn] = vpn
        self.generation += 1

    def map_small_bulk(self, vpns: np.ndarray, pfns: np.ndarray) -> None:
        """Install many 4KB mappings at once. Frames must be unowned 4KB
        movable allocations and pages unmapped; checked in bulk."""
        vpns = np.asarray(vpns, dtype=np.int64)
        pfns = np.asarray(pfns, dtype=np.int64)
        phys = self.phys
        if np.any(phys.owner_pid[pfns] >= 0) or np.any(phys.alloc_order[pfns] != 0):
            raise SimError("map_small_bulk: frames not free 4KB allocations")
        order = np.argsort(vpns, kind="stable")
        vpns, pfns = vpns[order], pfns[order]
        if vpns.size == 0:
            return
        i = np.searchsorted(np.asarray(self._starts, dtype=np.int64), vpns, side="right") - 1
        ends = np.asarray(self._ends + [0], dtype=np.int64)
        if np.any(i < 0) or np.any(ends[i] <= vpns):
            raise NotReserved("map_small_bulk outside reserved areas")
        chunks = vpns >> LEAF_ORDER
        cuts = np.flatnonzero(np.diff(chunks)) + 1
        for a, b in zip(np.r_[0, cuts].tolist(), np.r_[cuts, len(vpns)].tolist()):
            c = int(chunks[a])
            cb = c << LEAF_ORDER
            if cb in self.large or align_down(cb, 18) in self.huge:
                raise OverlapError("page already mapped")
            leaf = self.leaves.get(c)
            if leaf is None:
                leaf = self.leaves[c] = np.full(LEAF_PAGES, -1, dtype=np.int64)
            offs = vpns[a:b] & _LEAF_MASK
            if np.any(leaf[offs] >= 0):
                raise OverlapError("page already mapped")
            leaf[offs] = pfns[a:b]
        phys.owner_pid[pfns] = self.pid
        phys.owner_vpn[pfns] = vpns
        self.generation += 1

    def demote(self, vpn: int) -> bool:
        """Split the large mapping covering ``vpn`` into 4KB mappings."""
        m = self.mapping_at(vpn)
        if m is None or m.size == PageSize.BASE_4K:
            return False
        if m.size == PageSize.HUGE_1G:
            del self.huge[m.vpn]
        else:
            del self.large[m.vpn]
        self.phys.split_allocation(m.pfn)
        for k in range(m.size.frames // LEAF_PAGES):
            c = (m.vpn >> LEAF_ORDER) + k
            start = m.pfn + k * LEAF_PAGES
            self.leaves[c] = np.arange(start, start + LEAF_PAGES, dtype=np.int64)
        self.generation += 1
        return True

    def remap_frames(self, vpns, pfns) -> None:
        """Point existing 4KB mappings at new frames (after migration)."""
        vpns = np.asarray(vpns, dtype=np.int64)
        pfns = np.asarray(pfns, dtype=np.int64)
        if vpns.size == 0:
            return
        order = np.argsort(vpns, kind="stable")
        vpns, pfns = vpns[order], pfns[order]
        chunks = vpns >> LEAF_ORDER
        cuts = np.flatnonzero(np.diff(chunks)) + 1
        for a, b in zip(np.r_[0, cuts].tolist(), np.r_[cuts, len(vpns)].tolist()):
            leaf = self.leaves.get(int(chunks[a]))
            offs = vpns[a:b] & _LEAF_MASK
            if leaf is None or np.any(leaf[offs] < 0):
                raise SimError("remap of a page without a 4KB mapping")
            leaf[offs] = pfns[a:b]
        self.generation += 1

    def replace_mapping(self, vpn: int, size: PageSize, pfn: int) -> None:
        """Repoint a mapping of exactly this size at ``pfn`` (no frame changes)."""
        size = PageSize(size)
        if size == PageSize.HUGE_1G:
            self.huge[vpn] = pfn
        elif size == PageSize.LARGE_2M:
            self.large[vpn] = pfn
        else:
            self.leaves[vpn >> LEAF_ORDER][vpn & _LEAF_MASK] = pfn
        self.generation += 1

    def detach(self, vpn: int, npages: int) -> tuple[list[tuple[int, int]], np.ndarray]:
        """Remove all mappings inside [vpn, vpn+npages) without freeing frames.

        Large mappings straddling the range edge are demoted first. Returns
        (large blocks as (pfn, order), array of 4KB frames)."""
        end = vpn + npages
        for edge in (vpn, end - 1):
            m = self.mapping_at(edge)
            if m is not None and m.size != PageSize.BASE_4K and (m.vpn < vpn or m.vpn + m.size.frames > end):
                self.demote(edge)
        blocks: list[tuple[int, int]] = []
        hb = align_down(vpn, 18)
        while hb < end:
            if hb >= vpn and hb in self.huge:
                blocks.append((self.huge.pop(hb), 18))
            hb += 1 << 18
        small = []
        c = vpn >> LEAF_ORDER
        while (c << LEAF_ORDER) < end:
            cb = c << LEAF_ORDER
            if cb in self.large:
                blocks.append((self.large.pop(cb), LEAF_ORDER))
            leaf = self.leaves.get(c)
            if leaf is not None:
                a = max(vpn, cb) - cb
                b = min(end, cb + LEAF_PAGES) - cb
                seg = leaf[a:b]
                hit = seg[seg >= 0]
                if hit.size:
                    small.append(hit.copy())
                    seg[:] = -1
                if not np.any(leaf >= 0):
                    del self.leaves[c]
            c += 1
        frames = np.concatenate(small) if small else np.zeros(0, dtype=np.int64)
        phys = self.phys
        for pfn, order in blocks:
            phys.owner_pid[pfn:pfn + (1 << order)] = -1
            phys.owner_vpn[pfn:pfn + (1 << order)] = -1
        phys.owner_pid[frames] = -1
        phys.owner_vpn[frames] = -1
        self.generation += 1
        return blocks, frames

    def unmap_pages(self, vpn: int, npages: int, free: bool = True) -> None:
        blocks, frames = self.detach(vpn, npages)
        if free:
            for pfn, order in blocks:
                self.phys.free_block(pfn, order)
            self.phys.release_frames(frames)

    def unmap_range(self, vpn: int, size: PageSize, free: bool = True) -> None:
        self.unmap_pages(vpn, PageSize(size).frames, free=free)
