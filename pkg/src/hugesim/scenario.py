"""Builds a simulated system from a config, replays a trace under a policy
and produces metrics and comparison reports."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .compaction import REPORT_HEADER
from .config import Policy, ScenarioConfig
from .errors import ConfigError, IncompatibleConfigs, SimError, TraceError
from .fault import FaultHandler, LatencyConstants, ZeroPool
from .kernel import Kernel
from .promotion import LOG_HEADER, Khugepaged
from .sizes import FRAME_BYTES, FRAME_SHIFT, LEAF_ORDER, LEAF_PAGES, PageSize
from .tlb import CostModel, TlbModel
from .virt import NestedMap, PvLatencyConstants, walk_accesses
from .workload import (FILE_CACHE_PID, Access, Release, Reserve, Tick,
                       fragment_memory, gen_trace, incremental_workload,
                       parse_trace, preallocating_workload)

TIMESERIES_HEADER = "time_ns,mapped_4k,mapped_2m,mapped_1g"


@dataclass(frozen=True)
class PolicySpec:
    fault_sizes: tuple = ()
    promote_sizes: tuple = ()
    compaction_1g: str | None = None
    compaction_2m: str | None = None
    zero_pool: bool = False
    copyless: bool = False


POLICIES = {
    Policy.BASE4K: PolicySpec(),
    Policy.THP2M: PolicySpec((PageSize.LARGE_2M,), (PageSize.LARGE_2M,), None, "normal"),
    Policy.TRIDENT_1G_ONLY: PolicySpec((PageSize.HUGE_1G,), (PageSize.HUGE_1G,), "smart", None, True),
    Policy.TRIDENT: PolicySpec((PageSize.HUGE_1G, PageSize.LARGE_2M), (PageSize.HUGE_1G, PageSize.LARGE_2M),
                               "smart", "normal", True),
    Policy.TRIDENT_PV: PolicySpec((PageSize.HUGE_1G, PageSize.LARGE_2M), (PageSize.HUGE_1G, PageSize.LARGE_2M),
                                  "smart", "normal", True, True),
}


@dataclass
class RunMetrics:
    """Per-run report. Field names are part of the output format."""

    name: str = ""
    policy: str = ""
    seed: int = 0
    virtualized: bool = False
    sim_time_ns: int = 0
    accesses: int = 0
    l1_hits: int = 0
    l2_hits: int = 0
    tlb_misses: int = 0
    hits_by_size: dict = field(default_factory=dict)
    misses_by_size: dict = field(default_factory=dict)
    walk_accesses: int = 0
    walk_time: float = 0.0
    total_time: float = 0.0
    walk_fraction: float = 0.0
    faults: int = 0
    faults_by_size: dict = field(default_factory=dict)
    fault_latency_ns: int = 0
    alloc_1g_attempts: int = 0
    alloc_1g_failures: int = 0
    alloc_1g_failure_rate: float = 0.0
    promotions_1g: int = 0
    promotions_2m: int = 0
    promotion_1g_attempts: int = 0
    promotion_1g_failures: int = 0
    promotion_bytes_copied: int = 0
    promotion_latency_ns: int = 0
    compaction: dict = field(default_factory=dict)
    compaction_latency_ns: int = 0
    bytes_copied: int = 0
    hypercalls: int = 0
    exchange_latency_ns: int = 0
    footprint_bytes: int = 0
    mapped_bytes: dict = field(default_factory=dict)
    mapped_1g_fraction: float = 0.0
    mappable_bytes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunMetrics":
        return cls(**json.loads(text))


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    metrics: RunMetrics
    timeseries: list = field(default_factory=list)
    promotions: list = field(default_factory=list)
    compactions: list = field(default_factory=list)

    def timeseries_csv(self) -> str:
        rows = [TIMESERIES_HEADER] + [",".join(str(v) for v in r) for r in self.timeseries]
        return "\n".join(rows) + "\n"

    def promotions_csv(self) -> str:
        return "\n".join([LOG_HEADER] + [r.csv_row() for r in self.promotions]) + "\n"

    def compactions_csv(self) -> str:
        return "\n".join([REPORT_HEADER] + [r.csv_row() for r in self.compactions]) + "\n"

    def write(self, outdir: str, stem: str | None = None) -> dict:
        os.makedirs(outdir, exist_ok=True)
        stem = stem or self.config.label
        paths = {
            "metrics": os.path.join(outdir, f"{stem}.json"),
            "timeseries": os.path.join(outdir, f"{stem}.timeseries.csv"),
            "promotions": os.path.join(outdir, f"{stem}.promotions.csv"),
            "compactions": os.path.join(outdir, f"{stem}.compactions.csv"),
        }
        for key, text in (("metrics", self.metrics.to_json()), ("timeseries", self.timeseries_csv()),
                          ("promotions", self.promotions_csv()), ("compactions", self.compactions_csv())):
            with open(paths[key], "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return paths


# -- system construction ---------------------------------------------------------

class _Stack:
    """Fault handler, zero pool and khugepaged of one OS instance."""

    def __init__(self, kernel: Kernel, policy: Policy, cfg: ScenarioConfig, clock):
        spec = POLICIES[policy]
        lat = LatencyConstants(**asdict(cfg.latency))
        self.kernel = kernel
        self.spec = spec
        self.pool = None
        if spec.zero_pool:
            self.pool = ZeroPool(kernel.phys, cfg.zero_pool.capacity, cfg.zero_pool.fill_rate)
        self.faults = FaultHandler(kernel, spec.fault_sizes, lat, self.pool)
        self.khugepaged = None
        if cfg.khugepaged.enabled and spec.promote_sizes:
            self.khugepaged = Khugepaged(kernel, spec.promote_sizes, spec.compaction_1g, spec.compaction_2m,
                                         cfg.khugepaged.budget, clock=clock)


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.policy = cfg.policy_enum
        self.now = 0
        clock = lambda: self.now
        self.guest = Kernel.with_memory(cfg.memory)
        fragment_memory(self.guest, cfg.frag_spec())
        self.stack = _Stack(self.guest, self.policy, cfg, clock)
        self.nested = None
        self.host_stack = None
        self.pv = PvLatencyConstants(**asdict(cfg.pv))
        self.promotion_latency = 0
        if cfg.virtualization.enabled:
            host_mem = cfg.virtualization.host_memory or cfg.memory + (1 << 30)
            host = Kernel.with_memory(host_mem)
            self.host_stack = _Stack(host, Policy.parse(cfg.virtualization.host_policy), cfg, clock)
            self.nested = NestedMap(self.guest, host, vm_pid=0, latency=self.pv)
            self.nested.back_all(self.host_stack.faults)
            if self.stack.spec.copyless and self.stack.khugepaged is not None:
                self.stack.khugepaged.copyless = self._copyless
        self.tlb = TlbModel(cfg.tlb_config(), CostModel(**asdict(cfg.cost)))
        self.app_pids: set[int] = set()
        self.timeseries: list = []
        self._next_bg = 0
        self._next_pool = 0
        self._next_sample = 0
        self._open_run = None

    # -- background work -----------------------------------------------------

    def _copyless(self, space, vpn, block):
        out = self.nested.copyless_promote(space.pid, vpn, target=block)
        self.promotion_latency += out.latency_ns
        return out.bytes_copied, "copyless"

    def _background(self) -> None:
        cfg = self.cfg
        while self._next_pool <= self.now:
            for st in (self.stack, self.host_stack):
                if st is not None and st.pool is not None:
                    st.pool.tick()
            self._next_pool += cfg.zero_pool.interval_ns
        while self._next_bg <= self.now:
            for st in (self.stack, self.host_stack):
                if st is not None and st.khugepaged is not None:
                    st.khugepaged.step()
            self._next_bg += cfg.khugepaged.interval_ns
        while self._next_sample <= self.now:
            self.timeseries.append((self._next_sample,) + self._mapped_tuple())
            self._next_sample += cfg.timeseries_interval_ns

    def _mapped_tuple(self):
        mb = self.guest.mapped_bytes(self.app_pids)
        return mb[PageSize.BASE_4K], mb[PageSize.LARGE_2M], mb[PageSize.HUGE_1G]

    # -- replay ------------------------------------------------------------------

    def _space(self, pid: int):
        if pid == FILE_CACHE_PID:
            raise TraceError(f"pid {pid} is reserved for the file cache")
        if pid not in self.guest.spaces:
            self.guest.create_process(pid)
            self.app_pids.add(pid)
        return self.guest.spaces[pid]

    def apply(self, op) -> None:
        try:
            if isinstance(op, Access):
                self._access(op)
            elif isinstance(op, Tick):
                self.now += op.nanos
                self._background()
            elif isinstance(op, Reserve):
                self._space(op.pid).reserve_area(op.start, op.length)
            elif isinstance(op, Release):
                self._space(op.pid).release_area(op.start, op.length)
            else:
                raise TraceError(f"unknown trace op {op!r}")
        except SimError as exc:
            if isinstance(exc, TraceError):
                raise
            where = f"line {op.lineno}: " if getattr(op, "lineno", 0) else ""
            raise TraceError(f"{where}{type(exc).__name__}: {exc}") from exc

    def _access(self, op: Access) -> None:
        space = self._space(op.pid)
        vpn = op.va >> FRAME_SHIFT
        hit = space.translate(vpn)
        if hit is None:
            out = self.stack.faults.handle_fault(op.pid, op.va)
            if out.mapping.size == PageSize.BASE_4K:
                self._open_run = (op.pid, vpn)
            hit = space.translate(vpn)
        gpfn, size = hit
        if self.nested is None:
            self.tlb.access(vpn, size, None, op.count)
            return
        h = self.nested.vm.translate(gpfn)
        hsize = h[1]
        # the TLB caches the combined translation at the smaller page size
        self.tlb.access(vpn, min(size, hsize), walk_accesses(size, hsize), op.count)

    @staticmethod
    def _collect_run(run, op, it):
        """Gather the accesses that continue a 4KB first-touch sweep through
        the current 2MB chunk. Returns (batch, first op not taken)."""
        pid, vpn = run
        want, end = vpn + 1, (vpn | (LEAF_PAGES - 1)) + 1
        batch = []
        while (want < end and isinstance(op, Access) and op.pid == pid
               and op.va >> FRAME_SHIFT == want):
            batch.append(op)
            want += 1
            op = next(it, None)
        return batch, op

    def _apply_run(self, pid, batch) -> None:
        space = self.guest.spaces[pid]
        vpns = np.fromiter((o.va >> FRAME_SHIFT for o in batch), dtype=np.int64, count=len(batch))
        leaf = space.leaves[int(vpns[0]) >> LEAF_ORDER]
        todo = vpns[leaf[vpns & (LEAF_PAGES - 1)] < 0]
        phys = self.guest.phys
        if todo.size and int(phys.free_count.sum()) >= todo.size:
            try:
                self.stack.faults.fault_small_run(pid, todo)
            except SimError as exc:
                raise TraceError(f"line {batch[0].lineno}: {type(exc).__name__}: {exc}") from exc
        for o in batch:
            self.apply(o)
        self._open_run = None

    def ops(self):
        cfg = self.cfg
        t = cfg.trace
        if t.kind == "file":
            return parse_trace(cfg.trace_path())
        if t.kind == "preallocating":
            return preallocating_workload(t.pid, t.windows, t.base, t.accesses, cfg.seed, t.settle_ticks,
                                          t.tick_ns, t.pattern)
        if t.kind == "incremental":
            return incremental_workload(t.pid, areas=max(1, t.footprint >> 25), base=t.base, seed=cfg.seed)
        return _pattern_ops(t, cfg.seed)

    def run(self) -> ScenarioResult:
        self._background()
        it = iter(self.ops())
        op = next(it, None)
        while op is not None:
            self.apply(op)
            nxt = next(it, None)
            if self._open_run is not None:
                run, self._open_run = self._open_run, None
                batch, nxt = self._collect_run(run, nxt, it)
                if batch:
                    self._apply_run(run[0], batch)
            op = nxt
        self.timeseries.append((self.now,) + self._mapped_tuple())
        return ScenarioResult(self.cfg, self.metrics(), self.timeseries, self._promotions(), self._compactions())

    def _promotions(self):
        out = []
        for st in (self.stack, self.host_stack):
            if st is not None and st.khugepaged is not None:
                out += st.khugepaged.log
        return out

    def _compactions(self):
        out = []
        for st in (self.stack, self.host_stack):
            if st is not None and st.khugepaged is not None:
                out += st.khugepaged.compactions
        return out

    def metrics(self) -> RunMetrics:
        cfg = self.cfg
        m = RunMetrics(name=cfg.label, policy=self.policy.value, seed=cfg.seed,
                       virtualized=self.nested is not None, sim_time_ns=self.now)
        c = self.tlb.c
        m.accesses, m.l1_hits, m.l2_hits, m.tlb_misses = c.accesses, c.l1_hits, c.l2_hits, c.misses
        m.hits_by_size, m.misses_by_size = dict(c.hits_by_size), dict(c.misses_by_size)
        m.walk_accesses = c.walk_accesses
        m.walk_time = self.tlb.walk_time
        m.total_time = self.tlb.total_time
        m.walk_fraction = self.tlb.walk_fraction() if m.total_time > 0 else 0.0
        fs = self.stack.faults.stats
        m.faults = fs.faults
        m.faults_by_size = {"4KB": fs.faults_4k, "2MB": fs.faults_2m, "1GB": fs.faults_1g}
        m.fault_latency_ns = fs.latency_ns
        m.alloc_1g_attempts, m.alloc_1g_failures = fs.attempts_1g, fs.failures_1g
        m.alloc_1g_failure_rate = fs.failures_1g / fs.attempts_1g if fs.attempts_1g else 0.0
        kh = self.stack.khugepaged
        per_frame = self.pv.copy_2m / 512
        comp = {e: {"invocations": 0, "successes": 0, "frames_copied": 0, "bytes_copied": 0,
                    "wasted_frames": 0} for e in ("normal", "smart")}
        if kh is not None:
            ps = kh.stats
            m.promotions_1g, m.promotions_2m = ps.promotions_1g, ps.promotions_2m
            m.promotion_1g_attempts, m.promotion_1g_failures = ps.attempts_1g, ps.failures_1g
            m.promotion_bytes_copied = ps.bytes_copied
            copied_by_copy = sum(r.bytes_copied for r in kh.log if r.mechanism != "copyless")
            m.promotion_latency_ns = int(copied_by_copy // FRAME_BYTES * per_frame) + self.promotion_latency
            for r in kh.compactions:
                d = comp[r.engine]
                d["invocations"] += 1
                d["successes"] += int(r.success)
                d["frames_copied"] += r.frames_copied
                d["bytes_copied"] += r.bytes_copied
                d["wasted_frames"] += r.wasted_frames
        m.compaction = comp
        frames = sum(d["frames_copied"] for d in comp.values())
        m.compaction_latency_ns = int(frames * per_frame)
        m.bytes_copied = m.promotion_bytes_copied + sum(d["bytes_copied"] for d in comp.values())
        if self.nested is not None:
            m.hypercalls = self.nested.hypercalls
            m.exchange_latency_ns = self.nested.exchange_ns
        mb = self.guest.mapped_bytes(self.app_pids)
        m.mapped_bytes = {s.label: mb[s] for s in PageSize}
        m.footprint_bytes = sum(self.guest.spaces[p].reserved_pages() for p in sorted(self.app_pids)) * FRAME_BYTES
        m.mapped_1g_fraction = mb[PageSize.HUGE_1G] / m.footprint_bytes if m.footprint_bytes else 0.0
        m.mappable_bytes = {s.label: sum(self.guest.spaces[p].mappable_extents(s) for p in sorted(self.app_pids))
                            for s in PageSize}
        return m


def _pattern_ops(t, seed):
    yield Reserve(t.pid, t.base, t.footprint)
    yield from gen_trace(t.pattern, t.footprint, t.accesses, seed, base=t.base, pid=t.pid)
    yield Tick(t.tick_ns)


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    return Simulation(cfg).run()


# -- comparison ---------------------------------------------------------------------

COMPARE_COLUMNS = ["name", "policy", "walk_fraction", "mapped_4k", "mapped_2m", "mapped_1g",
                   "alloc_1g_failure_pct", "bytes_copied_normal", "bytes_copied_smart", "bytes_copied_total"]


def compare_rows(metrics: list[RunMetrics]) -> list[dict]:
    rows = []
    for m in metrics:
        rows.append({
            "name": m.name,
            "policy": m.policy,
            "walk_fraction": round(m.walk_fraction, 6),
            "mapped_4k": m.mapped_bytes["4KB"],
            "mapped_2m": m.mapped_bytes["2MB"],
            "mapped_1g": m.mapped_bytes["1GB"],
            "alloc_1g_failure_pct": round(100.0 * m.alloc_1g_failure_rate, 2),
            "bytes_copied_normal": m.compaction["normal"]["bytes_copied"],
            "bytes_copied_smart": m.compaction["smart"]["bytes_copied"],
            "bytes_copied_total": m.bytes_copied,
        })
    return rows


def rows_csv(rows: list[dict]) -> str:
    lines = [",".join(COMPARE_COLUMNS)]
    lines += [",".join(str(r[c]) for c in COMPARE_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"


def rows_text(rows: list[dict]) -> str:
    cells = [COMPARE_COLUMNS] + [[str(r[c]) for c in COMPARE_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARE_COLUMNS))]
    out = []
    for j, row in enumerate(cells):
        out.append("  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths))))
        if j == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def _trace_key(cfg: ScenarioConfig):
    d = asdict(cfg.trace)
    if cfg.trace.kind == "file":
        d["path"] = os.path.realpath(cfg.trace_path())
    return json.dumps(d, sort_keys=True), cfg.seed


def compare(configs: list[ScenarioConfig], outdir: str | None = None):
    """Run every config on the same trace and tabulate the results.

    Returns (rows, csv_text, aligned_text)."""
    if len(configs) < 2:
        raise IncompatibleConfigs("compare needs at least two configs")
    keys = {_trace_key(c) for c in configs}
    if len(keys) != 1:
        raise IncompatibleConfigs("configs do not share the same trace and seed")
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise IncompatibleConfigs("config names must be distinct (set 'name')")
    metrics = []
    for cfg in configs:
        res = run_scenario(cfg)
        if outdir is not None:
            res.write(outdir)
        metrics.append(res.metrics)
    rows = compare_rows(metrics)
    csv_text, text = rows_csv(rows), rows_text(rows)
    if outdir is not None:
        with open(os.path.join(outdir, "comparison.csv"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(csv_text)
        with open(os.path.join(outdir, "comparison.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return rows, csv_text, text


__all__ = ["POLICIES", "PolicySpec", "RunMetrics", "ScenarioResult", "Simulation", "run_scenario",
           "compare", "compare_rows", "rows_csv", "rows_text", "ConfigError"]
