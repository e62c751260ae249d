"""Set-associative LRU TLB hierarchy with per-size structures and a
first-order page-walk cost model (no walk caches, no speculation)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .sizes import LABELS, WALK_LEVELS, PageSize


@dataclass(frozen=True)
class TlbStructure:
    name: str
    sizes: tuple[PageSize, ...]
    entries: int
    ways: int

    def __post_init__(self):
        if self.entries <= 0 or self.ways <= 0 or self.entries % self.ways:
            raise ValueError(f"{self.name}: entries must be a positive multiple of ways")

    @property
    def sets(self) -> int:
        return self.entries // self.ways


def _default_l1():
    return (
        TlbStructure("l1_4k", (PageSize.BASE_4K,), 64, 4),
        TlbStructure("l1_2m", (PageSize.LARGE_2M,), 32, 4),
        TlbStructure("l1_1g", (PageSize.HUGE_1G,), 4, 4),
    )


def _default_l2():
    return (
        TlbStructure("l2_4k_2m", (PageSize.BASE_4K, PageSize.LARGE_2M), 1536, 12),
        TlbStructure("l2_1g", (PageSize.HUGE_1G,), 16, 4),
    )


@dataclass(frozen=True)
class TlbConfig:
    l1: tuple[TlbStructure, ...] = field(default_factory=_default_l1)
    l2: tuple[TlbStructure, ...] = field(default_factory=_default_l2)

    def __post_init__(self):
        for level in (self.l1, self.l2):
            served = [s for st in level for s in st.sizes]
            if len(served) != len(set(served)) or set(served) != set(PageSize):
                raise ValueError("each level must serve every page size exactly once")

    @classmethod
    def from_dict(cls, d: dict) -> "TlbConfig":
        def build(items):
            return tuple(TlbStructure(it["name"], tuple(PageSize.parse(s) for s in it["sizes"]),
                                      int(it["entries"]), int(it["ways"])) for it in items)
        base = cls()
        return cls(build(d["l1"]) if "l1" in d else base.l1, build(d["l2"]) if "l2" in d else base.l2)

    def to_dict(self) -> dict:
        def dump(level):
            return [{"name": s.name, "sizes": [p.label for p in s.sizes], "entries": s.entries, "ways": s.ways}
                    for s in level]
        return {"l1": dump(self.l1), "l2": dump(self.l2)}


class SetAssocLRU:
    """One TLB structure. Each set is a list ordered LRU first, MRU last."""

    def __init__(self, entries: int, ways: int):
        if entries % ways:
            raise ValueError("entries must be a multiple of ways")
        self.ways = ways
        self.nsets = entries // ways
        self.sets = [[] for _ in range(self.nsets)]

    def lookup(self, pn: int, key) -> bool:
        s = self.sets[pn % self.nsets]
        try:
            s.remove(key)
        except ValueError:
            return False
        s.append(key)
        return True

    def insert(self, pn: int, key):
        """Install ``key`` as MRU; return the evicted key, if any."""
        s = self.sets[pn % self.nsets]
        victim = None
        if len(s) >= self.ways:
            victim = s.pop(0)
        s.append(key)
        return victim

    def flush(self) -> None:
        for s in self.sets:
            s.clear()


L1_HIT, L2_HIT, MISS = "L1", "L2", "miss"


class TlbHierarchy:
    def __init__(self, config: TlbConfig | None = None):
        self.config = config or TlbConfig()
        self._l1 = {}
        self._l2 = {}
        for level, table in ((self.config.l1, self._l1), (self.config.l2, self._l2)):
            for st in level:
                arr = SetAssocLRU(st.entries, st.ways)
                for s in st.sizes:
                    table[s] = arr
        self._last = None

    def access(self, vpn: int, size: PageSize) -> str:
        """Look up the 4KB virtual page ``vpn`` mapped by a page of ``size``."""
        order = int(size)
        pn = vpn >> order
        key = (pn << 5) | order
        if key == self._last:
            # already MRU in its L1 set; a hit changes nothing
            return L1_HIT
        self._last = key
        l1 = self._l1[size]
        if l1.lookup(pn, key):
            return L1_HIT
        l2 = self._l2[size]
        if l2.lookup(pn, key):
            l1.insert(pn, key)
            return L2_HIT
        l2.insert(pn, key)
        l1.insert(pn, key)
        return MISS

    def flush(self) -> None:
        for arr in set(self._l1.values()) | set(self._l2.values()):
            arr.flush()
        self._last = None


@dataclass(frozen=True)
class CostModel:
    mem_latency: float = 100.0
    l2_penalty: float = 7.0
    base: float = 1.0

    def __post_init__(self):
        if self.mem_latency <= 0 or self.l2_penalty < 0 or self.base <= 0:
            raise ValueError("cost constants must be positive")

    @staticmethod
    def native_walk(size: PageSize) -> int:
        return PageSize(size).walk_levels


@dataclass
class TlbCounters:
    accesses: int = 0
    l1_hits: int = 0
    l2_hits: int = 0
    misses: int = 0
    walk_accesses: int = 0
    hits_by_size: dict = field(default_factory=lambda: {s.label: 0 for s in PageSize})
    misses_by_size: dict = field(default_factory=lambda: {s.label: 0 for s in PageSize})

    def as_dict(self) -> dict:
        return asdict(self)


class TlbModel:
    """TLB hierarchy plus cost accounting for one hardware thread."""

    def __init__(self, config: TlbConfig | None = None, cost: CostModel | None = None):
        self.tlb = TlbHierarchy(config)
        self.cost = cost or CostModel()
        self.c = TlbCounters()

    def access(self, vpn: int, size: PageSize, walk: int | None = None, count: int = 1) -> str:
        """Record ``count`` accesses to one page. ``walk`` overrides the walk
        length on a miss (nested translation)."""
        c = self.c
        r = self.tlb.access(vpn, size)
        c.accesses += count
        label = LABELS[size]
        if r == MISS:
            c.misses += 1
            c.misses_by_size[label] += 1
            c.walk_accesses += walk if walk is not None else WALK_LEVELS[size]
            c.l1_hits += count - 1
            c.hits_by_size[label] += count - 1
        else:
            if r == L2_HIT:
                c.l2_hits += 1
                c.l1_hits += count - 1
            else:
                c.l1_hits += count
            c.hits_by_size[label] += count
        return r

    @property
    def walk_time(self) -> float:
        return self.c.walk_accesses * self.cost.mem_latency

    @property
    def total_time(self) -> float:
        return self.c.accesses * self.cost.base + self.c.l2_hits * self.cost.l2_penalty + self.walk_time

    def walk_fraction(self) -> float:
        return walk_fraction(self.walk_time, self.total_time)


def walk_fraction(walk_time: float, total_time: float) -> float:
    if total_time <= 0:
        raise ValueError("total time must be positive")
    return walk_time / total_time
