"""Trace operations, trace generators and physical-memory fragmentation."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import ParseError, SpecInfeasible
from .kernel import Kernel
from .physmem import MOVABLE, UNMOVABLE
from .sizes import FRAME_BYTES, FRAME_SHIFT, GB, REGION_FRAMES

FILE_CACHE_PID = 0
# file cache pages live far above any application area
FILE_CACHE_BASE = 1 << 46


# -- trace ops -------------------------------------------------------------

@dataclass(frozen=True)
class Reserve:
    pid: int
    start: int
    length: int
    lineno: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Release:
    pid: int
    start: int
    length: int
    lineno: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Access:
    pid: int
    va: int
    count: int = 1
    lineno: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Tick:
    nanos: int
    lineno: int = field(default=0, compare=False)


TraceOp = Reserve | Release | Access | Tick


def _check_op(op) -> None:
    if isinstance(op, (Reserve, Release)):
        if op.start % FRAME_BYTES or op.length % FRAME_BYTES or op.length <= 0:
            raise ValueError("areas must be 4KB aligned and non-empty")
    elif isinstance(op, Access):
        if op.va % FRAME_BYTES:
            raise ValueError("access addresses must be 4KB aligned")
        if op.count < 1:
            raise ValueError("access count must be at least 1")
    elif isinstance(op, Tick):
        if op.nanos < 0:
            raise ValueError("tick must be non-negative")


def serialize(op) -> str:
    if isinstance(op, Reserve):
        return f"R {op.pid} {op.start:#x} {op.length:#x}"
    if isinstance(op, Release):
        return f"F {op.pid} {op.start:#x} {op.length:#x}"
    if isinstance(op, Access):
        return f"A {op.pid} {op.va:#x} {op.count}"
    if isinstance(op, Tick):
        return f"T {op.nanos}"
    raise TypeError(f"not a trace op: {op!r}")


def write_trace(ops: Iterable, fh) -> int:
    n = 0
    for op in ops:
        fh.write(serialize(op))
        fh.write("\n")
        n += 1
    return n


def _hex(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok, 16)
    except ValueError:
        raise ParseError(f"bad {what} {tok!r}", lineno) from None


def _dec(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok, 10)
    except ValueError:
        raise ParseError(f"bad {what} {tok!r}", lineno) from None


def parse_line(line: str, lineno: int = 0):
    """Parse one trace line; None for blanks and '#' comments."""
    parts = line.split()
    if not parts or parts[0].startswith("#"):
        return None
    kind, args = parts[0], parts[1:]
    want = {"R": 3, "F": 3, "A": 3, "T": 1}.get(kind)
    if want is None:
        raise ParseError(f"unknown op {kind!r}", lineno)
    if len(args) != want:
        raise ParseError(f"{kind} takes {want} fields, got {len(args)}", lineno)
    if kind == "T":
        op = Tick(_dec(args[0], lineno, "time"), lineno)
    else:
        pid = _dec(args[0], lineno, "pid")
        a = _hex(args[1], lineno, "address")
        if kind == "A":
            op = Access(pid, a, _dec(args[2], lineno, "count"), lineno)
        else:
            ln = _hex(args[2], lineno, "length")
            op = (Reserve if kind == "R" else Release)(pid, a, ln, lineno)
    try:
        _check_op(op)
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    return op


def parse_trace(source) -> Iterator:
    """Stream ops from a path or text file object, one line at a time."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "r", encoding="ascii") as fh:
            yield from parse_trace(fh)
        return
    for lineno, line in enumerate(source, 1):
        op = parse_line(line, lineno)
        if op is not None:
            yield op


def parse_text(text: str) -> list:
    return list(parse_trace(io.StringIO(text)))


# -- access pattern generators -------------------------------------------------

@dataclass(frozen=True)
class Pattern:
    kind: str  # "sequential" | "uniform" | "zipf"
    s: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "Pattern":
        t = text.strip().lower()
        if t in ("sequential", "seq"):
            return cls("sequential")
        if t in ("uniform", "uniformrandom", "random"):
            return cls("uniform")
        if t.startswith("zipf"):
            rest = t[4:].strip("():= ")
            return cls("zipf", float(rest) if rest else 1.0)
        raise ValueError(f"unknown pattern {text!r}")

    def __str__(self) -> str:
        return f"zipf({self.s:g})" if self.kind == "zipf" else self.kind


def page_stream(pattern: Pattern, npages: int, accesses: int, seed: int, chunk: int = 1 << 16):
    """Yield int64 arrays of page indices in [0, npages)."""
    if npages <= 0:
        raise ValueError("footprint must hold at least one page")
    rng = np.random.default_rng(seed)
    if pattern.kind == "zipf":
        if pattern.s < 0:
            raise ValueError("zipf exponent must be non-negative")
        w = np.arange(1, npages + 1, dtype=np.float64) ** -pattern.s
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        perm = rng.permutation(npages)
    done = 0
    while done < accesses:
        n = min(chunk, accesses - done)
        if pattern.kind == "sequential":
            out = (np.arange(done, done + n, dtype=np.int64)) % npages
        elif pattern.kind == "uniform":
            out = rng.integers(0, npages, size=n, dtype=np.int64)
        elif pattern.kind == "zipf":
            ranks = np.searchsorted(cdf, rng.random(n), side="right")
            out = perm[np.minimum(ranks, npages - 1)].astype(np.int64)
        else:
            raise ValueError(f"unknown pattern {pattern.kind!r}")
        yield out
        done += n


def gen_trace(pattern, footprint: int, accesses: int, seed: int, base: int = 0, pid: int = 1,
              reserve: bool = False) -> Iterator:
    """Access ops over ``footprint`` bytes starting at ``base``."""
    if isinstance(pattern, str):
        pattern = Pattern.parse(pattern)
    npages = footprint // FRAME_BYTES
    if reserve:
        yield Reserve(pid, base, npages * FRAME_BYTES)
    for arr in page_stream(pattern, npages, accesses, seed):
        for p in arr.tolist():
            yield Access(pid, base + (p << FRAME_SHIFT), 1)


def preallocating_workload(pid: int = 1, windows: int = 6, base: int = GB, accesses: int = 0,
                           seed: int = 0, settle_ticks: int = 8, tick_ns: int = 10_000_000,
                           pattern: str = "uniform") -> Iterator:
    """Reserve ``windows`` GB up front, touch every page once in order, let
    background work run, then issue ``accesses`` random accesses."""
    size = windows * GB
    yield Reserve(pid, base, size)
    npages = size // FRAME_BYTES
    per_tick = 1 << 16
    for p in range(npages):
        yield Access(pid, base + (p << FRAME_SHIFT), 1)
        if (p + 1) % per_tick == 0:
            yield Tick(tick_ns)
    for _ in range(settle_ticks):
        yield Tick(tick_ns)
    if accesses:
        for arr in page_stream(Pattern.parse(pattern), npages, accesses, seed):
            for p in arr.tolist():
                yield Access(pid, base + (p << FRAME_SHIFT), 1)
    for _ in range(settle_ticks):
        yield Tick(tick_ns)


def incremental_workload(pid: int = 1, areas: int = 64, area_bytes: int = 32 << 20, gap: int = 4 << 20,
                         base: int = GB, seed: int = 0) -> Iterator:
    """Many small areas separated by gaps; few of them are 1GB-mappable."""
    rng = np.random.default_rng(seed)
    va = base
    for _ in range(areas):
        yield Reserve(pid, va, area_bytes)
        for p in range(area_bytes // FRAME_BYTES):
            yield Access(pid, va + (p << FRAME_SHIFT), 1)
        va += area_bytes + gap * int(rng.integers(0, 2))
        yield Tick(1_000_000)


# -- fragmentation -------------------------------------------------------------------

@dataclass(frozen=True)
class FragmentationSpec:
    occupied_fraction: float = 0.0
    unmovable_fraction: float = 0.0
    clustering: float = 1.0
    seed: int = 0
    # 0 spreads occupancy evenly; 1 ramps it from dense low regions down to
    # empty top regions
    skew: float = 0.0
    # unmovable runs only land in this lowest fraction of regions
    unmovable_span: float = 1.0
    density_cap: float = 0.98

    def __post_init__(self):
        for name in ("occupied_fraction", "unmovable_fraction", "skew", "unmovable_span", "density_cap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 or math.isnan(v):
                raise ValueError(f"{name} must be in [0, 1]")
        if self.clustering < 1:
            raise ValueError("clustering must be at least 1")
        if self.unmovable_fraction > 0 and self.unmovable_span == 0:
            raise ValueError("unmovable frames need a non-empty span")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


DEFAULT_PRESET = FragmentationSpec(0.7, 0.02, 8.0, 0, skew=1.0, unmovable_span=0.5)
PRESETS = {
    "none": FragmentationSpec(),
    "default": DEFAULT_PRESET,
    "uniform": FragmentationSpec(0.7, 0.02, 8.0, 0),
}


def region_densities(spec: FragmentationSpec, nregions: int) -> np.ndarray:
    """Target occupied fraction per region, averaging to occupied_fraction."""
    occ, cap = spec.occupied_fraction, spec.density_cap
    if occ > cap + 1e-12:
        raise SpecInfeasible(f"occupied fraction {occ} exceeds the per-region cap {cap}")
    if nregions == 1 or spec.skew == 0:
        return np.full(nregions, occ)
    ramp = 1.0 - spec.skew * np.arange(nregions) / (nregions - 1)

    def mean_at(c):
        return float(np.clip(c * ramp, 0.0, cap).mean())

    if mean_at(1e9) < occ - 1e-12:
        raise SpecInfeasible("skewed occupancy cannot reach the requested fraction")
    lo, hi = 0.0, 1.0
    while mean_at(hi) < occ:
        hi *= 2
    for _ in range(200):
        mid = (lo + hi) / 2
        if mean_at(mid) < occ:
            lo = mid
        else:
            hi = mid
    return np.clip(hi * ramp, 0.0, cap)


def _region_targets(spec, nregions):
    dens = region_densities(spec, nregions)
    total = int(round(spec.occupied_fraction * nregions * REGION_FRAMES))
    raw = dens * REGION_FRAMES
    cnt = np.floor(raw).astype(np.int64)
    rem = total - int(cnt.sum())
    if rem > 0:
        frac = raw - cnt
        room = cnt < int(spec.density_cap * REGION_FRAMES)
        order = np.lexsort((np.arange(nregions), -frac))
        order = [r for r in order.tolist() if room[r]]
        for r in order[:rem]:
            cnt[r] += 1
    return cnt


def _place_runs(rng, occupied: int, mean_run: float):
    """Split ``occupied`` frames of one region into geometric runs placed at
    random; returns (starts, lengths)."""
    if occupied == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    p = 1.0 / mean_run
    est = int(occupied / mean_run * 1.2) + 16
    lens = rng.geometric(p, size=est).astype(np.int64)
    while lens.sum() < occupied:
        lens = np.concatenate([lens, rng.geometric(p, size=est).astype(np.int64)])
    cum = np.cumsum(lens)
    k = int(np.searchsorted(cum, occupied)) + 1
    lens = lens[:k].copy()
    lens[-1] -= int(cum[k - 1]) - occupied
    free = REGION_FRAMES - occupied
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    starts = cuts + np.concatenate([[0], np.cumsum(lens)[:-1]])
    return starts.astype(np.int64), lens


def fragment_memory(kernel: Kernel, spec: FragmentationSpec, pid: int = FILE_CACHE_PID) -> dict:
    """Populate memory with file-cache runs (movable, mapped 4KB into a
    process that khugepaged ignores) and unmovable kernel runs."""
    phys = kernel.phys
    n = phys.nregions
    if spec.occupied_fraction == 0:
        return {"movable": 0, "unmovable": 0}
    if np.any(phys.state != 0):
        raise SpecInfeasible("fragmentation must start from pristine memory")
    targets = _region_targets(spec, n)
    rng = np.random.default_rng(spec.seed)
    span = max(1, int(math.ceil(spec.unmovable_span * n))) if spec.unmovable_fraction > 0 else 0
    in_span = int(targets[:span].sum())
    p_unmov = 0.0
    if in_span:
        p_unmov = min(1.0, spec.unmovable_fraction * int(targets.sum()) / in_span)
    mov_parts, unmov_parts = [], []
    for r in range(n):
        starts, lens = _place_runs(rng, int(targets[r]), spec.clustering)
        flags = rng.random(starts.size) < p_unmov if r < span else np.zeros(starts.size, bool)
        base = r * REGION_FRAMES
        for sel, out in ((~flags, mov_parts), (flags, unmov_parts)):
            s, ln = starts[sel], lens[sel]
            if s.size:
                idx = np.repeat(s - np.cumsum(ln) + ln, ln) + np.arange(int(ln.sum()))
                out.append(base + idx)
    mov = np.concatenate(mov_parts) if mov_parts else np.zeros(0, np.int64)
    unmov = np.concatenate(unmov_parts) if unmov_parts else np.zeros(0, np.int64)
    phys.claim_frames(unmov, UNMOVABLE)
    phys.claim_frames(mov, MOVABLE)
    if mov.size:
        space = kernel.spaces.get(pid) or kernel.create_process(pid, thp_eligible=False)
        space.reserve_area(FILE_CACHE_BASE, int(mov.size) * FRAME_BYTES)
        vpns = (FILE_CACHE_BASE >> FRAME_SHIFT) + np.arange(mov.size, dtype=np.int64)
        space.map_small_bulk(vpns, mov)
    return {"movable": int(mov.size), "unmovable": int(unmov.size)}
