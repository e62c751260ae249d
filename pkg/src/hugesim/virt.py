"""Two-level translation and the paravirtual mapping-exchange hypercall.

The host runs the whole guest as one process (``vm_pid``) whose virtual page
numbers are guest frame numbers. Frame contents are authoritative in host
memory; guest content tokens are mirrored into the backing host frames.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (GuestUnmapped, HostUnmapped, NoContiguity, NoTargetRange,
                     PartialWindow, SimError)
from .kernel import Kernel
from .promotion import promote_range
from .sizes import FRAME_SHIFT, LEAF_ORDER, MAX_ORDER, PageSize

BATCH_LIMIT = 512
PAGE_BYTES = 4096

OK = 0
E_SRC_UNMAPPED = 1
E_DST_UNMAPPED = 2
E_SIZE_MISMATCH = 3
E_GUEST_REFUSED = 4


def walk_accesses(guest: PageSize, host: PageSize) -> int:
    """Memory accesses of a two-dimensional walk.

    Each guest level needs a host walk to locate its table page plus one
    read of the entry; the final guest-physical address needs one more
    host walk."""
    lg = PageSize(guest).walk_levels
    lh = PageSize(host).walk_levels
    return lg * (lh + 1) + lh


@dataclass(frozen=True)
class PvLatencyConstants:
    hypercall: int = 300  # ns
    # Fitted so that one full batch lands near half a millisecond.
    per_entry: int = 1_000
    copy_2m: int = 600_000_000 // 512

    def __post_init__(self):
        for name in ("hypercall", "per_entry", "copy_2m"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def exchange_cost(self, entries: int) -> int:
        return math.ceil(entries / BATCH_LIMIT) * self.hypercall + entries * self.per_entry

    def copy_cost(self, pages_2m: int) -> int:
        return pages_2m * self.copy_2m


@dataclass
class ExchangeBatch:
    sources: list[int]
    targets: list[int]
    granule: PageSize = PageSize.LARGE_2M
    results: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.sources) != len(self.targets):
            raise ValueError("sources and targets differ in length")
        if len(self.sources) > BATCH_LIMIT:
            raise ValueError(f"a batch holds at most {BATCH_LIMIT} pairs")
        allv = list(self.sources) + list(self.targets)
        if len(set(allv)) != len(allv):
            raise ValueError("batch addresses must be pairwise distinct")
        n = PageSize(self.granule).nbytes
        if any(a % n for a in allv):
            raise ValueError("batch addresses must be aligned to the granule")

    def __len__(self) -> int:
        return len(self.sources)


def encode_batch(batch: ExchangeBatch) -> tuple[bytes, bytes]:
    """The two shared pages: little-endian u64 gPAs, zero padded."""
    def page(vals):
        return struct.pack(f"<{BATCH_LIMIT}Q", *(list(vals) + [0] * (BATCH_LIMIT - len(vals))))
    return page(batch.sources), page(batch.targets)


def decode_batch(src_page: bytes, dst_page: bytes, count: int,
                 granule: PageSize = PageSize.LARGE_2M) -> ExchangeBatch:
    if len(src_page) != PAGE_BYTES or len(dst_page) != PAGE_BYTES:
        raise ValueError("shared pages must be 4096 bytes")
    if not 0 <= count <= BATCH_LIMIT:
        raise ValueError("bad entry count")
    s = struct.unpack(f"<{BATCH_LIMIT}Q", src_page)[:count]
    t = struct.unpack(f"<{BATCH_LIMIT}Q", dst_page)[:count]
    return ExchangeBatch(list(s), list(t), granule)


def encode_results(results) -> bytes:
    """Result page: the source slots overwritten with per-entry status."""
    vals = list(results) + [0] * (BATCH_LIMIT - len(results))
    return struct.pack(f"<{BATCH_LIMIT}Q", *vals)


def decode_results(page: bytes, count: int) -> list[int]:
    return list(struct.unpack(f"<{BATCH_LIMIT}Q", page)[:count])


@dataclass
class ExchangeResult:
    results: list[int]
    latency_ns: int
    hypercalls: int = 1

    @property
    def applied(self) -> int:
        return sum(1 for r in self.results if r == OK)


@dataclass
class CopylessOutcome:
    vpn: int
    target: int
    exchanged: int
    fallbacks: int
    hypercalls: int
    latency_ns: int
    bytes_copied: int


class NestedMap:
    def __init__(self, guest: Kernel, host: Kernel, vm_pid: int = 0,
                 latency: PvLatencyConstants | None = None):
        self.guest = guest
        self.host = host
        self.vm_pid = vm_pid
        self.latency = latency or PvLatencyConstants()
        self.hypercalls = 0
        self.exchange_ns = 0
        self._cache = None
        self._cache_gen = -1
        if vm_pid not in host.spaces:
            vm = host.create_process(vm_pid)
            vm.reserve_area(0, guest.phys.nframes << FRAME_SHIFT)

    @property
    def vm(self):
        return self.host.space(self.vm_pid)

    # -- backing and content mirroring ---------------------------------------

    def back_all(self, fault_handler) -> None:
        """Fault in host backing for every guest frame, lowest address first."""
        vm = self.vm
        g = 0
        n = self.guest.phys.nframes
        while g < n:
            if vm.translate(g) is None:
                m = fault_handler.handle_fault(self.vm_pid, g << FRAME_SHIFT).mapping
                g = m.vpn + m.size.frames
                if m.size == PageSize.BASE_4K:
                    # the rest of this 2MB chunk goes through the same 4KB path
                    end = min(n, ((g >> LEAF_ORDER) + 1) << LEAF_ORDER)
                    leaf = vm.leaves[g >> LEAF_ORDER] if g < end else None
                    if leaf is not None:
                        rest = np.arange(g, end, dtype=np.int64)
                        fault_handler.fault_small_run(self.vm_pid, rest[leaf[rest & ((1 << LEAF_ORDER) - 1)] < 0])
                        g = end
            else:
                m = vm.mapping_at(g)
                g = m.vpn + m.size.frames
        self.sync_all()

    def host_frames(self, gpfns) -> np.ndarray:
        if self._cache_gen != self.vm.generation or self._cache is None:
            self._cache = self.vm.window_pfns(0, self.guest.phys.nframes)
            self._cache_gen = self.vm.generation
        return self._cache[np.asarray(gpfns, dtype=np.int64)]

    def sync_all(self) -> None:
        """Copy every guest token into its backing host frame and start
        mirroring later guest content changes."""
        hp = self.host_frames(np.arange(self.guest.phys.nframes))
        if np.any(hp < 0):
            raise HostUnmapped("guest memory is not fully backed")
        self.host.phys.content[hp] = self.guest.phys.content
        self.guest.phys.content_listener = self._mirror

    def _mirror(self, gpfns) -> None:
        hp = self.host_frames(gpfns)
        ok = hp >= 0
        self.host.phys.content[hp[ok]] = self.guest.phys.content[np.asarray(gpfns)[ok]]

    # -- translation -----------------------------------------------------------

    def translate_nested(self, pid: int, gva: int) -> tuple[int, int]:
        """Return (host physical address, walk memory accesses)."""
        g = self.guest.space(pid).translate(gva >> FRAME_SHIFT)
        if g is None:
            raise GuestUnmapped(f"gVA {gva:#x} is not mapped")
        gpfn, gsize = g
        h = self.vm.translate(gpfn)
        if h is None:
            raise HostUnmapped(f"gPA {gpfn << FRAME_SHIFT:#x} is not backed")
        hpfn, hsize = h
        return (hpfn << FRAME_SHIFT) | (gva & 0xFFF), walk_accesses(gsize, hsize)

    def content_at(self, pid: int, gva: int) -> int:
        hpa, _ = self.translate_nested(pid, gva)
        return int(self.host.phys.content[hpa >> FRAME_SHIFT])

    def host_injective(self) -> bool:
        pf = self.host_frames(np.arange(self.guest.phys.nframes))
        pf = pf[pf >= 0]
        return np.unique(pf).size == pf.size

    # -- exchange --------------------------------------------------------------

    def _host_status(self, s: int, t: int, granule: PageSize) -> int:
        vm = self.vm
        ms, mt = vm.mapping_at(s), vm.mapping_at(t)
        if ms is None:
            return E_SRC_UNMAPPED
        if mt is None:
            return E_DST_UNMAPPED
        if ms.size != granule or mt.size != granule or ms.vpn != s or mt.vpn != t:
            return E_SIZE_MISMATCH
        return OK

    def hypercall_exchange(self, batch: ExchangeBatch, statuses=None) -> ExchangeResult:
        """Host side: swap gPA->hPA mappings for every well-formed pair.

        ``statuses`` lets the caller pre-fail entries (guest-side refusal);
        those entries are left untouched."""
        granule = PageSize(batch.granule)
        n = granule.frames
        vm = self.vm
        hphys = self.host.phys
        results = []
        for i, (sa, ta) in enumerate(zip(batch.sources, batch.targets)):
            s, t = sa >> FRAME_SHIFT, ta >> FRAME_SHIFT
            code = statuses[i] if statuses is not None else OK
            if code == OK:
                code = self._host_status(s, t, granule)
            if code == OK:
                hs, ht = vm.mapping_at(s).pfn, vm.mapping_at(t).pfn
                vm.replace_mapping(s, granule, ht)
                vm.replace_mapping(t, granule, hs)
                hphys.owner_vpn[ht:ht + n] = np.arange(s, s + n)
                hphys.owner_vpn[hs:hs + n] = np.arange(t, t + n)
            results.append(code)
        batch.results = results
        lat = self.latency.hypercall + self.latency.per_entry * len(batch)
        self.hypercalls += 1
        self.exchange_ns += lat
        return ExchangeResult(results, lat, 1)

    def _guest_refuses(self, s: int, t: int, n: int) -> bool:
        ao = self.guest.phys.alloc_order
        return bool(np.any(ao[s:s + n] > n.bit_length() - 1) or np.any(ao[t:t + n] > n.bit_length() - 1))

    def exchange_mappings(self, batch: ExchangeBatch) -> ExchangeResult:
        """Exchange host backing of each pair and fix up the guest so every
        guest virtual page keeps its data: guest frame metadata is swapped and
        guest page-table entries that referenced one frame now reference the
        other."""
        granule = PageSize(batch.granule)
        n = granule.frames
        pre = [E_GUEST_REFUSED if self._guest_refuses(sa >> FRAME_SHIFT, ta >> FRAME_SHIFT, n) else OK
               for sa, ta in zip(batch.sources, batch.targets)]
        res = self.hypercall_exchange(batch, pre)
        for (sa, ta), code in zip(zip(batch.sources, batch.targets), res.results):
            if code == OK:
                self._swap_guest(sa >> FRAME_SHIFT, ta >> FRAME_SHIFT, n)
        return res

    def _swap_guest(self, s: int, t: int, n: int) -> None:
        gp = self.guest.phys
        a, b = slice(s, s + n), slice(t, t + n)
        state_differs = not np.array_equal(gp.state[a], gp.state[b])
        owners = [(gp.owner_pid[a].copy(), gp.owner_vpn[a].copy(), t),
                  (gp.owner_pid[b].copy(), gp.owner_vpn[b].copy(), s)]
        for arr in (gp.state, gp.content, gp.alloc_order, gp.owner_pid, gp.owner_vpn):
            tmp = arr[a].copy()
            arr[a] = arr[b]
            arr[b] = tmp
        for pids, vpns, dest in owners:
            for pid in np.unique(pids[pids >= 0]).tolist():
                space = self.guest.space(pid)
                sel = np.flatnonzero(pids == pid)
                v0 = int(vpns[sel[0]])
                m = space.mapping_at(v0)
                if m is not None and m.size == PageSize.LARGE_2M and sel.size == n:
                    space.replace_mapping(m.vpn, m.size, dest)
                else:
                    space.remap_frames(vpns[sel], dest + sel)
        if state_differs:
            gp._resync_regions(np.unique([s >> MAX_ORDER, t >> MAX_ORDER]))
            gp.zeroed.discard((s >> MAX_ORDER) << MAX_ORDER)
            gp.zeroed.discard((t >> MAX_ORDER) << MAX_ORDER)

    def exchange_many(self, sources, targets, granule: PageSize = PageSize.LARGE_2M) -> ExchangeResult:
        """Split into batches of at most 512 pairs; one hypercall each."""
        results, lat, calls = [], 0, 0
        for i in range(0, len(sources), BATCH_LIMIT):
            r = self.exchange_mappings(ExchangeBatch(list(sources[i:i + BATCH_LIMIT]),
                                                     list(targets[i:i + BATCH_LIMIT]), granule))
            results += r.results
            lat += r.latency_ns
            calls += 1
        return ExchangeResult(results, lat, calls)

    # -- copy-less promotion ------------------------------------------------------

    def copyless_promote(self, pid: int, vpn: int, target: int | None = None) -> CopylessOutcome:
        """Promote a guest 1GB window mapped by 2MB pages without copying.

        Each 2MB source block swaps host backing with the matching 2MB slice
        of a free contiguous 1GB guest-physical block; entries the host
        rejects are copied instead."""
        space = self.guest.space(pid)
        n = 1 << MAX_ORDER
        if vpn % n:
            raise ValueError("window must be 1GB aligned")
        subs = [vpn + (k << LEAF_ORDER) for k in range(n >> LEAF_ORDER)]
        if not all(v in space.large for v in subs):
            raise PartialWindow(f"window {vpn:#x} is not fully mapped by 2MB pages")
        gphys = self.guest.phys
        if target is None:
            try:
                target = gphys.alloc_block(MAX_ORDER)
            except NoContiguity:
                raise NoTargetRange("no free contiguous 1GB guest-physical range") from None
        stats = {}

        def mover(src, dst):
            # the window is already detached; each 2MB block starts every 512 pages
            srcs = np.asarray(src, dtype=np.int64)[::1 << LEAF_ORDER].tolist()
            dsts = [target + (k << LEAF_ORDER) for k in range(len(subs))]
            calls, lat, fails = 0, 0, 0
            for i in range(0, len(srcs), BATCH_LIMIT):
                batch = ExchangeBatch([p << FRAME_SHIFT for p in srcs[i:i + BATCH_LIMIT]],
                                      [p << FRAME_SHIFT for p in dsts[i:i + BATCH_LIMIT]])
                res = self.hypercall_exchange(batch)
                calls += 1
                lat += res.latency_ns
                for s, t, code in zip(srcs[i:i + BATCH_LIMIT], dsts[i:i + BATCH_LIMIT], res.results):
                    m = 1 << LEAF_ORDER
                    if code == OK:
                        # data moved with the host mapping; keep guest tokens in step
                        tmp = gphys.content[t:t + m].copy()
                        gphys.content[t:t + m] = gphys.content[s:s + m]
                        gphys.content[s:s + m] = tmp
                    else:
                        gphys.copy_frames(np.arange(s, s + m), np.arange(t, t + m))
                        fails += 1
                        lat += self.latency.copy_2m
            stats.update(calls=calls, lat=lat, fails=fails)

        promote_range(self.guest, pid, vpn, PageSize.HUGE_1G, target, mover=mover)
        fails = stats["fails"]
        return CopylessOutcome(vpn, target, len(subs) - fails, fails, stats["calls"], stats["lat"],
                               fails * PageSize.LARGE_2M.nbytes)

    def check(self) -> None:
        """Guest tokens agree with the host frames backing them."""
        hp = self.host_frames(np.arange(self.guest.phys.nframes))
        ok = hp >= 0
        if not np.array_equal(self.host.phys.content[hp[ok]], self.guest.phys.content[ok]):
            raise SimError("guest and host contents diverged")
        if not self.host_injective():
            raise SimError("host map is not injective")
