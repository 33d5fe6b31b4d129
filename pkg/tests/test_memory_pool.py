import numpy as np
import pytest

from ale_minihydro.memory_pool import (
    ALIGNMENT,
    ArenaKind,
    ArenaPool,
    DoubleReleaseError,
    PoolLeakError,
    thread_local_footprint,
)

MiB = 1024 * 1024


def test_fresh_pool_stats_zero():
    stats = ArenaPool().snapshot_stats()
    for st in stats.values():
        assert st.current_bytes == 0
        assert st.peak_bytes == 0
        assert st.allocation_count == 0


def test_allocation_zero_initialized_and_aligned():
    pool = ArenaPool()
    for arena in ArenaKind:
        h = pool.allocate(arena, 4096)
        arr = pool.as_array(h, 512, np.float64)
        assert np.all(arr == 0)
        addr = arr.__array_interface__["data"][0]
        assert addr % ALIGNMENT == 0
        pool.release(h)


def test_pool_reuse_keeps_capacity():
    pool = ArenaPool()
    h = pool.allocate(ArenaKind.TEMPORARY, MiB)
    cap = pool.snapshot_stats()["temporary"].pool_capacity_bytes
    pool.release(h)
    h2 = pool.allocate(ArenaKind.TEMPORARY, MiB)
    assert pool.snapshot_stats()["temporary"].pool_capacity_bytes == cap
    pool.release(h2)


def test_hundred_cycles_single_growth_event():
    pool = ArenaPool()
    for _ in range(100):
        h = pool.allocate(ArenaKind.TEMPORARY, MiB)
        pool.release(h)
    st = pool.snapshot_stats()["temporary"]
    assert st.allocation_count == 100
    assert st.release_count == 100
    assert st.growth_events == 1


def test_current_bytes_restored_after_release():
    pool = ArenaPool()
    before = pool.snapshot_stats()["temporary"].current_bytes
    h = pool.allocate(ArenaKind.TEMPORARY, 1000)
    assert pool.snapshot_stats()["temporary"].current_bytes >= 1000
    pool.release(h)
    assert pool.snapshot_stats()["temporary"].current_bytes == before


def test_double_release_rejected():
    pool = ArenaPool()
    h = pool.allocate(ArenaKind.TEMPORARY, 64)
    pool.release(h)
    with pytest.raises(DoubleReleaseError, match="double release"):
        pool.release(h)


def test_reverse_order_release_keeps_space_reusable():
    pool = ArenaPool(initial_block=MiB)
    sizes = [100 * 1024, 200 * 1024, 150 * 1024, 50 * 1024]
    handles = [pool.allocate(ArenaKind.TEMPORARY, s) for s in sizes]
    for h in reversed(handles):
        pool.release(h)
    growth_before = pool.snapshot_stats()["temporary"].growth_events
    handles = [pool.allocate(ArenaKind.TEMPORARY, s) for s in sizes]
    assert pool.snapshot_stats()["temporary"].growth_events == growth_before
    for h in handles:
        pool.release(h)


def test_nonoverlapping_lifetimes_share_space():
    pool = ArenaPool(initial_block=MiB)
    size = 600 * 1024
    for _ in range(10):  # two "modules" alternate borrowing the same footprint
        h = pool.allocate(ArenaKind.TEMPORARY, size)
        pool.release(h)
        h = pool.allocate(ArenaKind.TEMPORARY, size)
        pool.release(h)
    st = pool.snapshot_stats()["temporary"]
    assert st.peak_bytes <= size + ALIGNMENT  # not 2 * size
    assert st.growth_events == 1


def test_coalesce_merges_adjacent_blocks():
    pool = ArenaPool(initial_block=4 * MiB)
    a = pool.allocate(ArenaKind.TEMPORARY, MiB)
    b = pool.allocate(ArenaKind.TEMPORARY, MiB)
    keep = pool.allocate(ArenaKind.TEMPORARY, MiB)
    pool.release(a)
    pool.release(b)
    assert len(pool.free_blocks()[0]) == 3  # two freed spans + the tail
    reclaimed = pool.coalesce()
    assert reclaimed >= MiB  # b's span folded into a's
    assert (0, 2 * MiB) in pool.free_blocks()[0]  # single merged 2 MiB block
    pool.release(keep)


def test_coalesce_fully_used_pool_reclaims_nothing():
    pool = ArenaPool(initial_block=MiB)
    h = pool.allocate(ArenaKind.TEMPORARY, MiB)
    assert pool.coalesce() == 0
    pool.release(h)


def test_coalesce_skips_nonadjacent_free_blocks():
    pool = ArenaPool(initial_block=4 * MiB)
    a = pool.allocate(ArenaKind.TEMPORARY, MiB)
    b = pool.allocate(ArenaKind.TEMPORARY, MiB)
    c = pool.allocate(ArenaKind.TEMPORARY, MiB)
    d = pool.allocate(ArenaKind.TEMPORARY, MiB)
    pool.release(a)
    pool.release(c)  # free-live-free-live: nothing adjacent to merge
    n_free = len(pool.free_blocks()[0])
    pool.coalesce()
    assert len(pool.free_blocks()[0]) == n_free
    for h in (b, d):
        pool.release(h)


def test_coalesce_drops_extra_empty_chunks():
    pool = ArenaPool(initial_block=MiB)
    h1 = pool.allocate(ArenaKind.TEMPORARY, 2 * MiB)
    h2 = pool.allocate(ArenaKind.TEMPORARY, 2 * MiB)
    h3 = pool.allocate(ArenaKind.TEMPORARY, 2 * MiB)  # forces a second chunk
    st = pool.snapshot_stats()["temporary"]
    assert st.growth_events == 2
    cap = st.pool_capacity_bytes
    pool.release(h3)
    pool.coalesce()
    assert pool.snapshot_stats()["temporary"].pool_capacity_bytes < cap
    pool.release(h1)
    pool.release(h2)
    # handle into the surviving chunk is still valid after the remap
    h3 = pool.allocate(ArenaKind.TEMPORARY, 64)
    assert np.all(pool.as_array(h3, 8) == 0)
    pool.release(h3)


def test_permanent_leak_flagged_temporary_leak_fails():
    pool = ArenaPool()
    pool.allocate(ArenaKind.PERMANENT, 8)
    report = pool.shutdown()
    assert len(report.leaked_permanent) == 1
    assert not report.leaked_temporary

    pool = ArenaPool()
    pool.allocate(ArenaKind.TEMPORARY, 8)
    with pytest.raises(PoolLeakError):
        pool.shutdown()


def test_clean_shutdown():
    pool = ArenaPool()
    h = pool.allocate(ArenaKind.PERMANENT, 128)
    pool.release(h)
    assert pool.shutdown().clean


def test_borrow_context_manager():
    pool = ArenaPool()
    with pool.borrow((4, 5)) as arr:
        assert arr.shape == (4, 5)
        arr[:] = 3.0
    assert pool.snapshot_stats()["temporary"].current_bytes == 0
    assert pool.shutdown().clean


def test_footprint_formula():
    assert thread_local_footprint(1024, 2048, 80) == 167_772_160
    assert thread_local_footprint(1, 1, 1) == 1
    with pytest.raises(ValueError):
        thread_local_footprint(0, 2048, 80)
    with pytest.raises(OverflowError):
        thread_local_footprint(2**40, 2**40, 2)


def test_allocation_size_must_be_positive():
    pool = ArenaPool()
    with pytest.raises(ValueError):
        pool.allocate(ArenaKind.TEMPORARY, 0)
