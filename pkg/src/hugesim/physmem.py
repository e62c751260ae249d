"""Physical memory: 4KB frame states, per-1GB region counters and a buddy
allocator whose free lists reach up to order 18 (1GB).

Frame metadata lives in flat numpy arrays indexed by frame number so that
bulk operations (compaction, promotion, fragmentation) stay vectorized.
Free lists are kept per region and per order; a lazily-pruned heap per order
gives lowest-address-first selection.
"""

from __future__ import annotations

import enum
import heapq
import io

import numpy as np

from .errors import DoubleFree, NoContiguity, SimError, UnknownBlock
from .sizes import GB, MAX_ORDER, REGION_FRAMES, REGION_ORDER, FRAME_BYTES

NORDERS = MAX_ORDER + 1
DEFAULT_FRAMES = (8 * GB) // FRAME_BYTES

# below this many frames, bulk claim/release go through the incremental path
_BULK_THRESHOLD = 4096


class FrameState(enum.IntEnum):
    FREE = 0
    MOVABLE = 1
    UNMOVABLE = 2


FREE = FrameState.FREE
MOVABLE = FrameState.MOVABLE
UNMOVABLE = FrameState.UNMOVABLE
# plain ints for the per-frame paths; enum lookups are slow there
_MOVABLE_I = 1
_UNMOVABLE_I = 2


def maximal_blocks(free: np.ndarray, base: int = 0, max_order: int = MAX_ORDER):
    """Return {order: array of block bases} for the maximal aligned free
    blocks of a boolean free-map whose length is a multiple of 2**max_order."""
    out = {}
    full = free.astype(bool, copy=False)
    levels = [full]
    for _ in range(max_order):
        full = full[0::2] & full[1::2]
        levels.append(full)
    for k in range(max_order + 1):
        mask = levels[k]
        if k < max_order:
            mask = mask & ~np.repeat(levels[k + 1], 2)
        idx = np.flatnonzero(mask)
        out[k] = base + (idx.astype(np.int64) << k)
    return out


def _kind(movability) -> int:
    k = int(movability)
    if k not in (_MOVABLE_I, _UNMOVABLE_I):
        raise ValueError("frames must be allocated MOVABLE or UNMOVABLE")
    return k


class PhysicalMemory:
    def __init__(self, frames: int = DEFAULT_FRAMES, debug: bool = False):
        small = 0 < frames < REGION_FRAMES and frames & (frames - 1) == 0
        if not small and (frames <= 0 or frames % REGION_FRAMES):
            raise ValueError("memory size must be a positive multiple of 1GB "
                             "or a power of two below 1GB")
        self.nframes = frames
        # memory below 1GB is a single region whose top order is smaller
        self.region_frames = min(frames, REGION_FRAMES)
        self.top_order = self.region_frames.bit_length() - 1
        self.nregions = frames // self.region_frames
        self.debug = debug

        self.state = np.zeros(frames, dtype=np.int8)
        self.content = np.zeros(frames, dtype=np.int64)
        self.owner_pid = np.full(frames, -1, dtype=np.int32)
        self.owner_vpn = np.full(frames, -1, dtype=np.int64)
        # order of the live allocation each frame belongs to, -1 when free
        self.alloc_order = np.full(frames, -1, dtype=np.int8)

        self.free_count = np.full(self.nregions, self.region_frames, dtype=np.int64)
        self.unmovable_count = np.zeros(self.nregions, dtype=np.int64)

        self._free = [[set() for _ in range(NORDERS)] for _ in range(self.nregions)]
        # per-region lazy min-heaps mirroring the free sets
        self._heap = [[[] for _ in range(NORDERS)] for _ in range(self.nregions)]
        self._nfree = [0] * NORDERS
        self._next_token = 1

        # bases of free 1GB blocks that the background zeroer has cleared
        self.zeroed: set[int] = set()
        # called as listener(frames) after the content of ``frames`` changes
        self.content_listener = None

        for r in range(self.nregions):
            self._add_free(r << REGION_ORDER, self.top_order)

    @classmethod
    def from_bytes(cls, nbytes: int, debug: bool = False) -> "PhysicalMemory":
        return cls(nbytes // FRAME_BYTES, debug=debug)

    # -- free list primitives -------------------------------------------

    def _add_free(self, base: int, order: int) -> None:
        self._free[base >> REGION_ORDER][order].add(base)
        heapq.heappush(self._heap[base >> REGION_ORDER][order], base)
        self._nfree[order] += 1

    def _del_free(self, base: int, order: int) -> None:
        self._free[base >> REGION_ORDER][order].remove(base)
        self._nfree[order] -= 1

    def is_free_block(self, base: int, order: int) -> bool:
        if base < 0 or base >= self.nframes:
            return False
        return base in self._free[base >> REGION_ORDER][order]

    def _pop_lowest(self, order: int) -> int:
        for r, sets in enumerate(self._free):
            live = sets[order]
            if live:
                break
        heap = self._heap[r][order]
        if len(heap) > 4 * len(live) + 64:
            heap = self._heap[r][order] = sorted(live)
        while True:
            base = heapq.heappop(heap)
            if base in live:
                self._del_free(base, order)
                return base

    def has_free(self, order: int) -> bool:
        return any(self._nfree[k] for k in range(order, NORDERS))

    def free_block_count(self, order: int) -> int:
        return self._nfree[order]

    def largest_free_order(self) -> int:
        for k in range(MAX_ORDER, -1, -1):
            if self._nfree[k]:
                return k
        return -1

    def free_blocks(self, order: int) -> list[int]:
        out = []
        for sets in self._free:
            out.extend(sets[order])
        return sorted(out)

    def region_free_blocks(self, region: int, order: int) -> list[int]:
        return sorted(self._free[region][order])

    def free_list_state(self) -> dict[int, list[int]]:
        return {k: self.free_blocks(k) for k in range(NORDERS)}

    # -- tokens ---------------------------------------------------------

    def new_tokens(self, n: int) -> np.ndarray:
        start = self._next_token
        self._next_token += n
        return np.arange(start, start + n, dtype=np.int64)

    # -- allocation -----------------------------------------------------

    def _occupy(self, base: int, order: int, kind: int) -> None:
        if order == 0:
            self.state[base] = kind
            self.content[base] = self._next_token
            self._next_token += 1
            self.alloc_order[base] = 0
            r = base >> REGION_ORDER
            self.free_count[r] -= 1
            if kind == _UNMOVABLE_I:
                self.unmovable_count[r] += 1
            self.zeroed.discard(r << REGION_ORDER)
            if self.content_listener is not None:
                self.content_listener(np.array([base], dtype=np.int64))
            return
        n = 1 << order
        sl = slice(base, base + n)
        self.state[sl] = kind
        self.content[sl] = self.new_tokens(n)
        self._notify(np.arange(base, base + n, dtype=np.int64))
        self.alloc_order[sl] = order
        r = base >> REGION_ORDER
        self.free_count[r] -= n
        if kind == _UNMOVABLE_I:
            self.unmovable_count[r] += n
        self.zeroed.discard(r << REGION_ORDER)

    def alloc_block(self, order: int, movability: FrameState = MOVABLE) -> int:
        """Allocate 2**order frames; return the block's base frame number."""
        if not 0 <= order <= MAX_ORDER:
            raise ValueError(f"order {order} out of range")
        kind = _kind(movability)
        for k in range(order, NORDERS):
            if self._nfree[k]:
                break
        else:
            raise NoContiguity(f"no free block of order >= {order}")
        base = self._pop_lowest(k)
        while k > order:
            k -= 1
            self._add_free(base + (1 << k), k)
        self._occupy(base, order, kind)
        if self.debug:
            self.check()
        return base

    def alloc_frames(self, count: int) -> np.ndarray:
        """``count`` successive order-0 allocations, same result as calling
        alloc_block(0) repeatedly."""
        out = np.empty(count, dtype=np.int64)
        dbg, self.debug = self.debug, False
        try:
            for i in range(count):
                out[i] = self.alloc_block(0)
        finally:
            self.debug = dbg
        if self.debug:
            self.check()
        return out

    def claim(self, base: int, order: int, movability: FrameState = MOVABLE) -> int:
        """Allocate the specific aligned block [base, base + 2**order)."""
        if base & ((1 << order) - 1) or not 0 <= base < self.nframes:
            raise ValueError("misaligned or out-of-range block")
        b = None
        for k in range(order, NORDERS):
            cand = base & ~((1 << k) - 1)
            if self.is_free_block(cand, k):
                b = cand
                break
        if b is None:
            raise NoContiguity(f"block {base:#x}/{order} is not free")
        self._del_free(b, k)
        while k > order:
            k -= 1
            half = 1 << k
            if base >= b + half:
                self._add_free(b, k)
                b += half
            else:
                self._add_free(b + half, k)
        self._occupy(base, order, _kind(movability))
        if self.debug:
            self.check()
        return base

    def free_block(self, base: int, order: int) -> None:
        if not 0 <= order <= MAX_ORDER:
            raise ValueError(f"order {order} out of range")
        n = 1 << order
        if base < 0 or base + n > self.nframes or base & (n - 1):
            raise UnknownBlock(f"no block at {base:#x} order {order}")
        sl = slice(base, base + n)
        if not np.all(self.alloc_order[sl] == order):
            if np.all(self.state[sl] == FREE):
                raise DoubleFree(f"block {base:#x} order {order} is already free")
            raise UnknownBlock(f"no allocation of order {order} at {base:#x}")
        if np.any(self.owner_pid[sl] >= 0):
            raise SimError(f"block {base:#x} is still mapped")
        unmov = int(np.count_nonzero(self.state[sl] == UNMOVABLE))
        self.state[sl] = FREE
        self.content[sl] = 0
        self._notify(np.arange(base, base + n, dtype=np.int64))
        self.alloc_order[sl] = -1
        r = base >> REGION_ORDER
        self.free_count[r] += n
        self.unmovable_count[r] -= unmov
        self._coalesce(base, order)
        if self.debug:
            self.check()

    def _free_frame(self, f: int) -> None:
        # order-0 free of a frame already validated by the caller
        r = f >> REGION_ORDER
        if self.state[f] == _UNMOVABLE_I:
            self.unmovable_count[r] -= 1
        self.state[f] = FREE
        self.content[f] = 0
        self.alloc_order[f] = -1
        self.free_count[r] += 1
        self._coalesce(f, 0)

    def _coalesce(self, base: int, order: int) -> None:
        while order < self.top_order:
            buddy = base ^ (1 << order)
            if not self.is_free_block(buddy, order):
                break
            self._del_free(buddy, order)
            base = min(base, buddy)
            order += 1
        self._add_free(base, order)

    def split_allocation(self, base: int) -> None:
        """Turn the allocation starting at ``base`` into single-frame
        allocations (used when a large mapping is demoted)."""
        order = int(self.alloc_order[base])
        if order <= 0:
            return
        n = 1 << order
        self.alloc_order[base:base + n] = 0

    # -- bulk frame operations -----------------------------------------

    def claim_frames(self, frames, movability: FrameState = MOVABLE) -> None:
        """Allocate the given free frames as individual 4KB allocations."""
        frames = np.asarray(frames, dtype=np.int64)
        if frames.size == 0:
            return
        if np.any(self.state[frames] != FREE):
            raise SimError("claim_frames on non-free frames")
        kind = _kind(movability)
        if frames.size <= _BULK_THRESHOLD:
            dbg, self.debug = self.debug, False
            listener, self.content_listener = self.content_listener, None
            try:
                for f in frames.tolist():
                    self.claim(f, 0, kind)
            finally:
                self.debug = dbg
                self.content_listener = listener
            self._notify(frames)
        else:
            self.state[frames] = kind
            self.content[frames] = self.new_tokens(frames.size)
            self._notify(frames)
            self.alloc_order[frames] = 0
            self._resync_regions(np.unique(frames >> REGION_ORDER))
        if self.debug:
            self.check()

    def release_frames(self, frames) -> None:
        """Free individual 4KB allocations."""
        frames = np.asarray(frames, dtype=np.int64)
        if frames.size == 0:
            return
        if np.any(self.alloc_order[frames] != 0):
            raise UnknownBlock("release_frames on frames that are not 4KB allocations")
        if np.any(self.owner_pid[frames] >= 0):
            raise SimError("release_frames on mapped frames")
        if frames.size <= _BULK_THRESHOLD:
            if np.unique(frames).size != frames.size:
                raise DoubleFree("release_frames got a frame twice")
            self._notify(frames)
            for f in frames.tolist():
                self._free_frame(f)
        else:
            self.state[frames] = FREE
            self.content[frames] = 0
            self._notify(frames)
            self.alloc_order[frames] = -1
            self._resync_regions(np.unique(frames >> REGION_ORDER))
        if self.debug:
            self.check()

    def move_frames(self, src, dst) -> None:
        """Copy the contents and ownership of 4KB allocations ``src`` into the
        free frames ``dst`` and release ``src``. Mapping tables are the
        caller's responsibility."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if src.size != dst.size:
            raise ValueError("src/dst length mismatch")
        if src.size == 0:
            return
        kinds = self.state[src]
        if np.any(kinds != MOVABLE):
            raise SimError("only movable frames can be migrated")
        dbg, self.debug = self.debug, False
        self.claim_frames(dst, MOVABLE)
        self.copy_frames(src, dst)
        self.owner_pid[dst] = self.owner_pid[src]
        self.owner_vpn[dst] = self.owner_vpn[src]
        self.owner_pid[src] = -1
        self.owner_vpn[src] = -1
        self.release_frames(src)
        self.debug = dbg
        if self.debug:
            self.check()

    def copy_frames(self, src, dst) -> None:
        self.content[dst] = self.content[src]
        self._notify(np.asarray(dst, dtype=np.int64))

    def _notify(self, frames) -> None:
        if self.content_listener is not None:
            self.content_listener(frames)

    def _resync_regions(self, regions) -> None:
        for r in np.asarray(regions, dtype=np.int64).tolist():
            base = r << REGION_ORDER
            st = self.state[base:base + self.region_frames]
            free = st == FREE
            self.free_count[r] = int(np.count_nonzero(free))
            self.unmovable_count[r] = int(np.count_nonzero(st == UNMOVABLE))
            if self.free_count[r] < self.region_frames:
                self.zeroed.discard(base)
            blocks = maximal_blocks(free, base, self.top_order)
            sets = self._free[r]
            for k in range(NORDERS):
                new = blocks[k].tolist() if k in blocks else []
                self._nfree[k] += len(new) - len(sets[k])
                sets[k] = set(new)
                # ascending order is already a valid heap
                self._heap[r][k] = new

    # -- inspection -------------------------------------------------------

    def region_stats(self, region: int) -> tuple[int, int]:
        if not 0 <= region < self.nregions:
            raise IndexError(region)
        return int(self.free_count[region]), int(self.unmovable_count[region])

    def region_of(self, frame: int) -> int:
        return frame >> REGION_ORDER

    def count(self, kind: FrameState) -> int:
        return int(np.count_nonzero(self.state == kind))

    def snapshot_csv(self) -> str:
        buf = io.StringIO()
        for r in range(self.nregions):
            buf.write(f"{r},{int(self.free_count[r])},{int(self.unmovable_count[r])}\n")
        return buf.getvalue()

    def check(self) -> None:
        """Recount everything and compare with the incremental state."""
        st = self.state.reshape(self.nregions, self.region_frames)
        free = np.count_nonzero(st == FREE, axis=1)
        unmov = np.count_nonzero(st == UNMOVABLE, axis=1)
        assert np.array_equal(free, self.free_count), "free_count drift"
        assert np.array_equal(unmov, self.unmovable_count), "unmovable_count drift"
        isfree = self.state == FREE
        assert np.all((self.content == 0) == isfree), "content tokens vs free state"
        assert np.all((self.alloc_order < 0) == isfree), "alloc_order vs free state"
        assert not np.any(self.owner_pid[isfree] >= 0), "free frame has an owner"
        assert not np.any(self.owner_pid[self.state == UNMOVABLE] >= 0), "unmovable frame has an owner"
        totals = [0] * NORDERS
        for r in range(self.nregions):
            base = r << REGION_ORDER
            blocks = maximal_blocks(isfree[base:base + self.region_frames], base, self.top_order)
            for k in range(NORDERS):
                assert set(blocks[k].tolist() if k in blocks else []) == self._free[r][k], f"free list mismatch r={r} k={k}"
                totals[k] += len(self._free[r][k])
        assert totals == self._nfree, "free block totals"
        for b in self.zeroed:
            assert self.is_free_block(b, MAX_ORDER), "zeroed block is not free"
