"""The simulated OS instance: physical memory plus its address spaces."""

from __future__ import annotations

import numpy as np

from .addrspace import AddressSpace
from .errors import SimError
from .physmem import MOVABLE, PhysicalMemory
from .sizes import PageSize


class Kernel:
    def __init__(self, phys: PhysicalMemory):
        self.phys = phys
        self.spaces: dict[int, AddressSpace] = {}

    @classmethod
    def with_memory(cls, nbytes: int, debug: bool = False) -> "Kernel":
        return cls(PhysicalMemory.from_bytes(nbytes, debug=debug))

    def create_process(self, pid: int, thp_eligible: bool = True) -> AddressSpace:
        if pid in self.spaces:
            raise SimError(f"pid {pid} exists")
        if pid < 0:
            raise ValueError("pid must be non-negative")
        space = AddressSpace(pid, self.phys, thp_eligible=thp_eligible)
        self.spaces[pid] = space
        return space

    def space(self, pid: int) -> AddressSpace:
        try:
            return self.spaces[pid]
        except KeyError:
            raise SimError(f"no process {pid}") from None

    def migrate(self, src, dst) -> None:
        """Move frames ``src`` into free frames ``dst`` and fix up mappings.

        Frames that belong to larger allocations have their mapping demoted
        to 4KB first."""
        phys = self.phys
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if src.size == 0:
            return
        big = src[phys.alloc_order[src] > 0]
        if big.size:
            orders = phys.alloc_order[big].astype(np.int64)
            heads = np.unique(big & ~((np.int64(1) << orders) - 1))
            for head in heads.tolist():
                pid = int(phys.owner_pid[head])
                if pid >= 0:
                    self.spaces[pid].demote(int(phys.owner_vpn[head]))
                else:
                    phys.split_allocation(head)
        pids = phys.owner_pid[src].copy()
        vpns = phys.owner_vpn[src].copy()
        phys.move_frames(src, dst)
        for pid in np.unique(pids[pids >= 0]).tolist():
            sel = pids == pid
            self.spaces[pid].remap_frames(vpns[sel], dst[sel])

    def migrate_block(self, src: int, dst: int, order: int) -> None:
        """Move one whole movable allocation into the free aligned block at
        ``dst``; a mapping of that size follows it without being split."""
        phys = self.phys
        n = 1 << order
        if int(phys.alloc_order[src]) != order or np.any(phys.state[src:src + n] != MOVABLE):
            raise SimError(f"no movable order-{order} allocation at {src:#x}")
        pid = int(phys.owner_pid[src])
        vpn = int(phys.owner_vpn[src])
        phys.claim(dst, order, MOVABLE)
        phys.copy_frames(np.arange(src, src + n), np.arange(dst, dst + n))
        if pid >= 0:
            phys.owner_pid[dst:dst + n] = pid
            phys.owner_vpn[dst:dst + n] = phys.owner_vpn[src:src + n]
            phys.owner_pid[src:src + n] = -1
            phys.owner_vpn[src:src + n] = -1
            space = self.spaces[pid]
            m = space.mapping_at(vpn)
            if m is not None and m.pfn == src and m.size.order == order:
                space.replace_mapping(vpn, m.size, dst)
            else:
                # mapped by smaller pages
                space.remap_frames(np.arange(vpn, vpn + n), np.arange(dst, dst + n))
        phys.free_block(src, order)

    def mapped_bytes(self, pids=None) -> dict[PageSize, int]:
        total = {s: 0 for s in PageSize}
        for pid, space in self.spaces.items():
            if pids is not None and pid not in pids:
                continue
            for size, nbytes in space.mapped_bytes().items():
                total[size] += nbytes
        return total

    def check(self) -> None:
        """Full consistency check: physical memory plus reverse map."""
        self.phys.check()
        phys = self.phys
        seen = np.zeros(phys.nframes, dtype=bool)
        for pid, space in self.spaces.items():
            for v, p in space.huge.items():
                self._check_block(pid, v, p, 1 << 18, seen)
            for v, p in space.large.items():
                self._check_block(pid, v, p, 1 << 9, seen)
            for c, leaf in space.leaves.items():
                offs = np.flatnonzero(leaf >= 0)
                assert offs.size, "empty leaf table left behind"
                pf = leaf[offs]
                vp = (c << 9) + offs
                assert not np.any(seen[pf]), "frame mapped twice"
                seen[pf] = True
                assert np.all(phys.owner_pid[pf] == pid)
                assert np.array_equal(phys.owner_vpn[pf], vp)
        owned = phys.owner_pid >= 0
        assert np.array_equal(owned, seen), "reverse map has entries without mappings"

    def _check_block(self, pid, vpn, pfn, n, seen):
        phys = self.phys
        sl = slice(pfn, pfn + n)
        assert not np.any(seen[sl]), "frame mapped twice"
        seen[sl] = True
        assert np.all(phys.owner_pid[sl] == pid)
        assert np.array_equal(phys.owner_vpn[sl], np.arange(vpn, vpn + n))
