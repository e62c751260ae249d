import random

import numpy as np
import pytest

from hugesim.errors import DoubleFree, NoContiguity, UnknownBlock
from hugesim.physmem import FREE, MOVABLE, UNMOVABLE, PhysicalMemory, maximal_blocks
from hugesim.sizes import MB, REGION_FRAMES

from suites import buddy_oracle_run


def test_buddy_matches_bitmap_reference():
    phys, spent = buddy_oracle_run(1)
    phys.check()
    assert spent < 10.0


def test_lowest_address_and_lower_half_split():
    phys = PhysicalMemory.from_bytes(2 << 30)
    assert phys.alloc_block(0) == 0
    # the split left one free block at every order below 18 in region 0
    for k in range(18):
        assert phys.free_blocks(k) == [1 << k]
    assert phys.free_blocks(18) == [REGION_FRAMES]
    assert phys.alloc_block(9) == 512
    assert phys.alloc_block(18) == REGION_FRAMES


def test_full_coalesce_after_freeing_everything():
    phys = PhysicalMemory.from_bytes(1 << 30)
    rng = random.Random(3)
    blocks = [(phys.alloc_block(o), o) for o in (rng.choice([0, 3, 9]) for _ in range(500))]
    rng.shuffle(blocks)
    for b, o in blocks:
        phys.free_block(b, o)
    assert phys.free_blocks(18) == [0]
    assert phys.largest_free_order() == 18
    phys.check()


def test_claim_specific_block_splits_around_it():
    phys = PhysicalMemory.from_bytes(1 << 30)
    phys.claim(3 * 512, 9)
    assert phys.alloc_order[3 * 512] == 9
    assert not phys.is_free_block(0, 18)
    assert phys.is_free_block(2 * 512, 9) and phys.is_free_block(0, 10)
    with pytest.raises(NoContiguity):
        phys.claim(3 * 512, 0)
    phys.check()


def test_free_errors():
    phys = PhysicalMemory.from_bytes(1 << 30)
    b = phys.alloc_block(4)
    with pytest.raises(UnknownBlock):
        phys.free_block(b, 3)
    with pytest.raises(UnknownBlock):
        phys.free_block(b + 1, 4)
    phys.free_block(b, 4)
    with pytest.raises(DoubleFree):
        phys.free_block(b, 4)


def test_size_validation():
    with pytest.raises(ValueError):
        PhysicalMemory(3 << 17)
    with pytest.raises(ValueError):
        PhysicalMemory(REGION_FRAMES + 512)
    assert PhysicalMemory.from_bytes(256 * MB).top_order == 16


def test_region_counters_match_recount():
    rng = np.random.default_rng(5)
    phys = PhysicalMemory.from_bytes(4 << 30)
    for _ in range(20):
        free = np.flatnonzero(phys.state == FREE)
        pick = rng.choice(free, size=int(rng.integers(1, 5000)), replace=False)
        phys.claim_frames(pick, UNMOVABLE if rng.random() < 0.3 else MOVABLE)
        taken = np.flatnonzero(phys.alloc_order == 0)
        rel = rng.choice(taken, size=taken.size // 3, replace=False)
        phys.release_frames(rel)
        st = phys.state.reshape(phys.nregions, -1)
        assert np.array_equal(phys.free_count, (st == FREE).sum(axis=1))
        assert np.array_equal(phys.unmovable_count, (st == UNMOVABLE).sum(axis=1))
    phys.check()


def test_maximal_blocks_small_map():
    free = np.array([1, 1, 1, 1, 0, 1, 1, 0], dtype=bool)
    b = maximal_blocks(free, 0, 3)
    assert b[2].tolist() == [0]
    assert b[0].tolist() == [5, 6]
    assert b[1].tolist() == [] and b[3].tolist() == []


def test_move_frames_preserves_tokens():
    phys = PhysicalMemory.from_bytes(1 << 30)
    src = phys.alloc_frames(10)
    tokens = phys.content[src].copy()
    dst = np.arange(1000, 1010)
    phys.move_frames(src, dst)
    assert np.array_equal(phys.content[dst], tokens)
    assert np.all(phys.state[src] == FREE)
    phys.check()
