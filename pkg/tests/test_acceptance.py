"""Acceptance suite: one test per headline criterion. Each records a
PASS/FAIL line that is printed in the terminal summary and echoed to
stdout (visible with ``-s``)."""

import contextlib
import json
import math
import random
import statistics
import time

import numpy as np

from hugesim.compaction import normal_compact, smart_compact
from hugesim.config import ScenarioConfig
from hugesim.fault import FaultHandler
from hugesim.kernel import Kernel
from hugesim.scenario import run_scenario
from hugesim.sizes import GB, MB, WALK_LEVELS, PageSize
from hugesim.tlb import TlbConfig, TlbHierarchy
from hugesim.virt import BATCH_LIMIT, ExchangeBatch, PvLatencyConstants, walk_accesses

from conftest import VERDICTS
from oracles import BruteHierarchy, brute_mappable, nested_walk_enumerate
from suites import (TLB_ORDERS, buddy_oracle_run, copy_count_kernel, engine_pair_suite, gups_walk_fractions,
                    guest_2m_window, gva_relation, host_map, mixed_tlb_trace, nested_stack,
                    populated_nested, random_layout, waste_state)


@contextlib.contextmanager
def criterion(name):
    """Run the body; record PASS with the details it fills in, or FAIL with
    the assertion message, then re-raise."""
    info = []
    try:
        yield info
    except BaseException as exc:
        line = f"FAIL  {name}: {exc!s}".splitlines()[0]
        VERDICTS.append(line)
        print(line)
        raise
    line = f"PASS  {name}" + (f": {'; '.join(info)}" if info else "")
    VERDICTS.append(line)
    print(line)


def test_buddy_oracle():
    with criterion("buddy oracle") as info:
        t0 = time.perf_counter()
        for seed in (1, 2):
            phys, _ = buddy_oracle_run(seed)
            phys.check()
        per_run = (time.perf_counter() - t0) / 2
        info.append(f"2 x 10,000 ops on 256MB match the bitmap reference, {per_run:.1f}s per run")
        assert per_run < 10.0, f"run took {per_run:.1f}s"


def test_compaction_copy_counts():
    with criterion("compaction copy counts") as info:
        rep = normal_compact(copy_count_kernel(), 18)
        assert rep.frames_copied == 261_888, rep.frames_copied
        assert rep.bytes_copied == 261_888 * 4096
        rep2 = smart_compact(copy_count_kernel())
        assert rep2.frames_copied == 62_144, rep2.frames_copied
        info.append(f"normal copies {rep.frames_copied:,} frames, smart copies {rep2.frames_copied:,}")


def test_smart_copies_less_than_normal():
    with criterion("smart vs normal bytes copied") as info:
        pairs = engine_pair_suite()
        ok = [p for p in pairs if p.success_pair]
        assert len(ok) >= 50, f"only {len(ok)} success pairs"
        worse = [p.seed for p in ok if not p.smart_bytes < p.normal_bytes]
        assert not worse, f"smart did not copy less for seeds {worse}"
        red = sorted(p.reduction for p in ok)
        med = statistics.median(red)
        q = np.percentile(red, [0, 25, 50, 75, 100])
        info.append(f"{len(ok)} pairs, reduction min/q1/median/q3/max = "
                    + "/".join(f"{100 * v:.0f}%" for v in q))
        if med < 0.5:
            info.append(f"FLAG median {100 * med:.1f}% below 50%")


def test_smart_zero_waste():
    with criterion("smart compaction zero waste") as info:
        pairs = engine_pair_suite()
        assert all(p.smart_wasted == 0 for p in pairs)
        normal_waste = sum(p.normal_wasted > 0 for p in pairs)
        rep = normal_compact(waste_state(), 18)
        assert rep.wasted_frames == 1000, rep.wasted_frames
        rep2 = smart_compact(waste_state())
        assert rep2.wasted_frames == 0
        info.append(f"smart waste 0 in all {len(pairs)} states; normal wasted frames in {normal_waste}; "
                    f"constructed interruption wastes {rep.wasted_frames}")


def test_nested_walk_costs():
    with criterion("nested walk costs") as info:
        head = [walk_accesses(s, s) for s in (PageSize.BASE_4K, PageSize.LARGE_2M, PageSize.HUGE_1G)]
        assert head == [24, 15, 8], head
        sizes = list(PageSize)
        for gsize in sizes:
            for hsize in sizes:
                host = [s for s in (PageSize.HUGE_1G, PageSize.LARGE_2M) if s <= hsize]
                nm = nested_stack(host_sizes=host)
                gs = nm.guest.create_process(1)
                gs.reserve_area(GB, GB)
                fh = FaultHandler(nm.guest, sizes=[s for s in (PageSize.HUGE_1G, PageSize.LARGE_2M) if s <= gsize])
                fh.handle_fault(1, GB + 4096 * 9)
                _, acc = nm.translate_nested(1, GB + 4096 * 9)
                want = nested_walk_enumerate(WALK_LEVELS[int(gsize)], WALK_LEVELS[int(hsize)])
                assert acc == want, (gsize, hsize, acc, want)
        info.append("24/15/8 and all 9 size pairs match enumeration")


def test_exchange_semantics():
    with criterion("exchange semantics") as info:
        nm = populated_nested()
        rng = np.random.default_rng(42)
        nchunks = nm.guest.phys.nframes >> 9
        for _ in range(40):
            n = int(rng.integers(1, 200))
            chunks = rng.choice(nchunks, 2 * n, replace=False)
            src = [int(c) * 2 * MB for c in chunks[:n]]
            dst = [int(c) * 2 * MB for c in chunks[n:]]
            rel0, map0 = gva_relation(nm), host_map(nm)
            nm.exchange_mappings(ExchangeBatch(src, dst))
            rel1 = gva_relation(nm)
            assert all(np.array_equal(rel0[p], rel1[p]) for p in rel0), "gVA->token relation changed"
            assert np.array_equal(np.sort(host_map(nm)), np.sort(map0)), "hPA multiset changed"
            nm.exchange_mappings(ExchangeBatch(src, dst))
            assert np.array_equal(host_map(nm), map0), "second exchange is not the identity"
        nm.check()
        for n in (1, 511, 512, 513, 1024, 1300):
            before = nm.hypercalls
            res = nm.exchange_many([2 * (j % 512) * 2 * MB for j in range(n)],
                                   [(2 * (j % 512) + 1) * 2 * MB for j in range(n)])
            assert res.hypercalls == math.ceil(n / BATCH_LIMIT) == nm.hypercalls - before
        info.append("40 random batches preserve the relation and the hPA multiset, twice is identity; "
                    "ceil(n/512) hypercalls")


def test_pv_latency():
    with criterion("pv latency model") as info:
        nm = nested_stack(2 * GB, 3 * GB)
        guest_2m_window(nm)
        out = nm.copyless_promote(1, GB >> 12)
        copy_ns = PvLatencyConstants().copy_cost(512)
        ratio = copy_ns / out.latency_ns
        info.append(f"copyless {out.latency_ns / 1e3:.1f} us vs copy {copy_ns / 1e6:.0f} ms, ratio {ratio:.0f}x")
        assert out.bytes_copied == 0 and out.hypercalls == 1
        assert 300_000 <= out.latency_ns <= 700_000
        assert ratio >= 100


def _table_cfg(khugepaged: bool):
    return ScenarioConfig.from_dict({
        "name": "promote" if khugepaged else "fault-only", "policy": "trident", "memory": "24GB", "seed": 0,
        "trace": {"kind": "preallocating", "windows": 6, "accesses": 20_000},
        "fragmentation": {"preset": "default"},
        "khugepaged": {"enabled": khugepaged},
    })


def test_fault_only_vs_promotion():
    with criterion("fault-only vs promotion 1GB coverage") as info:
        fault = run_scenario(_table_cfg(False)).metrics
        promo = run_scenario(_table_cfg(True)).metrics
        info.append(f"fault-only 1GB-mapped {100 * fault.mapped_1g_fraction:.1f}%, "
                    f"with promotion {100 * promo.mapped_1g_fraction:.1f}%, "
                    f"1GB fault failure rate {100 * fault.alloc_1g_failure_rate:.1f}%")
        assert fault.mapped_1g_fraction < 0.20
        assert promo.mapped_1g_fraction > 0.50
        assert promo.compaction["smart"]["successes"] > 0
        assert 0.30 <= fault.alloc_1g_failure_rate <= 0.95


def test_mappability_invariant():
    with criterion("mappability invariant") as info:
        rng = random.Random(11)
        k = Kernel.with_memory(GB)
        strict = 0
        for pid in range(1000):
            space = k.create_process(pid)
            areas = random_layout(rng)
            for lo, hi in areas:
                space.reserve_area(lo << 12, (hi - lo) << 12)
            e1 = space.mappable_extents(PageSize.HUGE_1G)
            e2 = space.mappable_extents(PageSize.LARGE_2M)
            assert e1 <= e2
            assert e2 == brute_mappable(areas, 512) * 2 * MB
            assert e1 == brute_mappable(areas, 1 << 18) * GB
            strict += e1 < e2
        info.append(f"1000 layouts agree with enumeration; 1GB < 2MB strictly in {strict}")


def test_tlb_model():
    with criterion("tlb model") as info:
        cfg = TlbConfig()
        tlb, ref = TlbHierarchy(cfg), BruteHierarchy(cfg)
        vpns, sizes = mixed_tlb_trace(0)
        for v, s in zip(vpns, sizes):
            size = TLB_ORDERS[s]
            assert tlb.access(v, size) == ref.access(v, int(size))
        wf = gups_walk_fractions()
        info.append("1e5 accesses match brute LRU; GUPS 32GB walk fraction "
                    + ", ".join(f"{k} {v:.3f}" for k, v in wf.items()))
        assert wf["1GB"] < wf["2MB"] < wf["4KB"]


def test_end_to_end_determinism(tmp_path):
    with criterion("end-to-end determinism") as info:
        configs = [
            {"name": "frag", "policy": "trident", "memory": "6GB", "seed": 5,
             "trace": {"kind": "preallocating", "windows": 1, "accesses": 5_000},
             "fragmentation": {"preset": "default", "occupied_fraction": 0.55, "skew": 0.5}},
            {"name": "pv", "policy": "tridentpv", "memory": "8GB", "seed": 1,
             "trace": {"kind": "preallocating", "windows": 1, "accesses": 5_000},
             "fragmentation": {"preset": "default", "occupied_fraction": 0.4, "skew": 0.8, "clustering": 512},
             "virtualization": {"enabled": True}},
            {"name": "zipf", "policy": "thp2m", "memory": "2GB", "seed": 9,
             "trace": {"kind": "pattern", "pattern": "zipf:1.1", "footprint": "512MB", "accesses": 30_000}},
        ]
        for d in configs:
            outs = []
            for rep in range(2):
                res = run_scenario(ScenarioConfig.from_dict(json.loads(json.dumps(d))))
                paths = res.write(str(tmp_path / f"{d['name']}{rep}"))
                outs.append({k: open(p, "rb").read() for k, p in paths.items()})
            assert outs[0] == outs[1], f"{d['name']} reports differ"
        info.append(f"{len(configs)} scenarios (plain, virtualized, pattern) re-run byte-identical")


if __name__ == "__main__":
    import sys

    import pytest
    sys.exit(pytest.main([__file__, "-q"]))
