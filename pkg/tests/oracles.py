"""Independent reference models used by the tests.

These are deliberately simple and slow; they share no code with the
package beyond plain constants."""

from __future__ import annotations

import numpy as np


class BitmapBuddy:
    """Buddy semantics over a plain free bitmap.

    With full coalescing the free lists are exactly the maximal aligned free
    blocks, so allocation is: smallest order holding a maximal block, lowest
    address, lower part of the split."""

    def __init__(self, frames: int):
        self.free = np.ones(frames, dtype=bool)
        self.top = frames.bit_length() - 1
        self.live = {}

    def _full(self, k):
        return self.free.reshape(-1, 1 << k).all(axis=1)

    def maximal(self, k):
        full = self._full(k)
        if k < self.top:
            full = full & ~np.repeat(self._full(k + 1), 2)
        return (np.flatnonzero(full) << k).tolist()

    def alloc(self, order):
        for k in range(order, self.top + 1):
            blocks = self.maximal(k)
            if blocks:
                base = blocks[0]
                self.free[base:base + (1 << order)] = False
                self.live[base] = order
                return base
        return None

    def release(self, base):
        order = self.live.pop(base)
        self.free[base:base + (1 << order)] = True

    def free_lists(self):
        return {k: self.maximal(k) for k in range(self.top + 1)}


def brute_mappable(areas, npages):
    """Count size-aligned windows of ``npages`` lying inside the union of
    page ranges ``areas`` by testing every aligned window up to the top."""
    merged = []
    for lo, hi in sorted(areas):
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    if not merged:
        return 0
    starts = np.array([m[0] for m in merged])
    ends = np.array([m[1] for m in merged])
    w = np.arange(0, merged[-1][1], npages)
    i = np.searchsorted(starts, w, side="right") - 1
    ok = (i >= 0) & (ends[np.maximum(i, 0)] >= w + npages)
    return int(np.count_nonzero(ok))


class BruteLRU:
    """One TLB structure: per set, a dict key -> last-use timestamp; the
    victim is the minimum timestamp."""

    def __init__(self, entries, ways):
        self.ways = ways
        self.nsets = entries // ways
        self.sets = [dict() for _ in range(self.nsets)]
        self.t = 0

    def contains(self, pn, key):
        return key in self.sets[pn % self.nsets]

    def access(self, pn, key):
        self.t += 1
        s = self.sets[pn % self.nsets]
        hit = key in s
        if not hit and len(s) >= self.ways:
            del s[min(s, key=s.get)]
        s[key] = self.t
        return hit


class BruteHierarchy:
    """Two-level exclusive-of-nothing TLB: L1 per size, L2 per group; an L2
    hit fills L1, a miss fills both."""

    def __init__(self, config):
        self.l1, self.l2 = {}, {}
        for level, table in ((config.l1, self.l1), (config.l2, self.l2)):
            for st in level:
                lru = BruteLRU(st.entries, st.ways)
                for s in st.sizes:
                    table[int(s)] = lru

    def access(self, vpn, order):
        pn = vpn >> order
        key = (pn, order)
        l1 = self.l1[order]
        # probe without touching, then update
        if l1.contains(pn, key):
            l1.access(pn, key)
            return "L1"
        l2 = self.l2[order]
        hit = l2.access(pn, key)
        l1.access(pn, key)
        return "L2" if hit else "miss"


def nested_walk_enumerate(guest_levels, host_levels):
    """Count memory references of a 2D walk by listing them: every guest
    table pointer (one per guest level, plus the final gPA) is translated by
    a full host walk, and each guest level also reads its own entry."""
    refs = []
    for g in range(guest_levels + 1):
        for h in range(host_levels):
            refs.append(("host", g, h))
        if g < guest_levels:
            refs.append(("guest", g))
    return len(refs)
