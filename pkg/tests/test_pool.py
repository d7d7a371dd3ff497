"""Page pool: reserve/grow/free/fork/translate plus census invariants."""

from array import array

import numpy as np
import pytest

from pagedkv.errors import (
    CapacityExhausted,
    DuplicateSequence,
    InvalidPrefix,
    OutOfRange,
    UnknownSequence,
)
from pagedkv.pool import MAX_POOL_PAGES, PageAddress, PagePool


def test_reserve_rounds_up_to_pages():
    pool = PagePool(16, page_size=64)
    pages = pool.reserve("a", 130)  # ceil(130/64) = 3
    assert len(pages) == 3
    assert len(pool.table("a").entries) == 3
    assert pool.table("a").logical_len == 0  # reserve provisions capacity only


def test_reserve_zero_length_creates_empty_table():
    pool = PagePool(4, page_size=64)
    assert pool.reserve("a", 0) == []
    assert pool.has_sequence("a")
    assert len(pool.table("a").entries) == 0


def test_reserve_exhaustion_is_atomic():
    pool = PagePool(2, page_size=64)
    before = pool.census()
    with pytest.raises(CapacityExhausted):
        pool.reserve("a", 192)  # needs 3 pages, only 2 exist
    after = pool.census()
    assert not pool.has_sequence("a")
    assert after.conserved
    assert after.live_pages == before.live_pages == 0
    assert after.free_pages + after.never_allocated == 2
    # the pool can still hand out everything it owns
    assert len(pool.reserve("b", 128)) == 2


def test_duplicate_reserve_rejected():
    pool = PagePool(8, page_size=64)
    pool.reserve("a", 10)
    with pytest.raises(DuplicateSequence):
        pool.reserve("a", 10)


def test_grow_appends_only_missing_pages():
    pool = PagePool(8, page_size=64)
    pool.reserve("a", 128)  # 2 pages
    new = pool.grow("a", 129)
    assert len(new) == 1
    assert len(pool.table("a").entries) == 3
    assert pool.grow("a", 100) == []  # within capacity: no-op
    with pytest.raises(UnknownSequence):
        pool.grow("nope", 10)


def test_grow_preserves_existing_entries():
    pool = PagePool(8, page_size=16)
    first = pool.reserve("a", 32)
    pool.grow("a", 60)
    assert list(pool.table("a").entries)[:2] == first


def test_free_reclaims_unshared_pages():
    pool = PagePool(8, page_size=64)
    pool.reserve("a", 192)
    assert pool.free("a") == 3
    assert pool.free_page_count == 3
    with pytest.raises(UnknownSequence):
        pool.free("a")  # reclamation is not idempotent by design


def test_free_after_fork_keeps_shared_pages_live():
    pool = PagePool(8, page_size=64)
    pool.reserve("parent", 192)  # 3 pages
    pool.table("parent").logical_len = 192
    pool.fork("parent", "child", 128)  # shares 2 full pages
    reclaimed = pool.free("parent")
    assert reclaimed == 1  # only the unshared third page
    census = pool.census()
    assert census.live_pages == 2
    assert census.conserved


def test_reserve_reuses_reclaimed_pages_lifo():
    pool = PagePool(3, page_size=64)
    granted = pool.reserve("a", 192)
    pool.free("a")  # bump cursor is spent; only the stack can satisfy this
    again = pool.reserve("b", 192)
    assert sorted(again) == sorted(granted)
    assert again == granted[::-1]  # LIFO reuse order


def test_fork_block_aligned_shares_without_copies():
    pool = PagePool(8, page_size=64)
    pool.reserve("p", 128)
    pool.table("p").logical_len = 128
    live_before = pool.census().live_pages
    child = pool.fork("p", "c", 128)
    assert list(child.entries) == list(pool.table("p").entries)
    assert child.logical_len == 128
    assert pool.census().live_pages == live_before  # zero new pages
    for page in child.entries:
        assert pool.page_refcount(page) == 2


def test_fork_partial_page_deep_copies_remainder():
    pool = PagePool(8, page_size=64)
    pool.reserve("p", 128)
    pool.table("p").logical_len = 128
    child = pool.fork("p", "c", 100)  # 1 shared page + 36 slots copied
    parent_entries = list(pool.table("p").entries)
    assert child.entries[0] == parent_entries[0]
    assert child.entries[1] != parent_entries[1]
    assert pool.page_refcount(child.entries[0]) == 2
    assert pool.page_refcount(child.entries[1]) == 1
    assert child.logical_len == 100


def test_fork_validation_errors():
    pool = PagePool(8, page_size=64)
    pool.reserve("p", 64)
    pool.table("p").logical_len = 50
    with pytest.raises(InvalidPrefix):
        pool.fork("p", "c", 51)
    with pytest.raises(UnknownSequence):
        pool.fork("ghost", "c", 1)
    pool.fork("p", "c", 50)
    with pytest.raises(DuplicateSequence):
        pool.fork("p", "c", 50)


def test_fork_exhaustion_atomic_when_copy_page_unavailable():
    pool = PagePool(1, page_size=64)
    pool.reserve("p", 64)
    pool.table("p").logical_len = 64
    with pytest.raises(CapacityExhausted):
        pool.fork("p", "c", 10)  # partial copy needs a page; none left
    assert not pool.has_sequence("c")
    assert pool.census().conserved


def test_translate_address_arithmetic():
    pool = PagePool(16, page_size=4)
    pool.reserve("t", 12)
    pool.table("t").entries[:] = array("I", [7, 2, 9])
    addr = pool.translate("t", 9)
    assert addr == PageAddress(page_id=9, offset=1)
    assert addr.flat(4) == 37
    assert pool.translate("t", 0) == PageAddress(page_id=7, offset=0)


def test_translate_boundaries():
    pool = PagePool(8, page_size=64)
    pool.reserve("s", 64)
    page = pool.table("s").entries[0]
    assert pool.translate("s", 63) == PageAddress(page_id=page, offset=63)
    with pytest.raises(OutOfRange):
        pool.translate("s", 64)
    with pytest.raises(OutOfRange):
        pool.translate("s", -1)
    with pytest.raises(UnknownSequence):
        pool.translate("ghost", 0)


def test_block_table_entries_are_32_bit():
    pool = PagePool(4, page_size=16)
    pool.reserve("a", 16)
    assert pool.table("a").entries.itemsize == 4


def test_capacity_bounds_validation():
    with pytest.raises(ValueError):
        PagePool(0, page_size=64)
    with pytest.raises(ValueError):
        PagePool(MAX_POOL_PAGES + 1, page_size=64)
    with pytest.raises(ValueError):
        PagePool(8, page_size=48)  # not a power of two
    with pytest.raises(ValueError):
        PagePool(8, page_size=0)


def test_census_conservation_over_random_script():
    rng = np.random.default_rng(5)
    pool = PagePool(64, page_size=16)
    live = []
    for i in range(400):
        op = rng.choice(["reserve", "grow", "free", "fork"])
        try:
            if op == "reserve" or not live:
                name = f"s{i}"
                pool.reserve(name, int(rng.integers(0, 96)))
                pool.table(name).logical_len = pool.table(name).capacity(16)
                live.append(name)
            elif op == "grow":
                name = live[int(rng.integers(len(live)))]
                pool.grow(name, pool.table(name).capacity(16) + int(rng.integers(0, 48)))
                pool.table(name).logical_len = pool.table(name).capacity(16)
            elif op == "free":
                pool.free(live.pop(int(rng.integers(len(live)))))
            else:
                parent = live[int(rng.integers(len(live)))]
                prefix = int(rng.integers(0, pool.table(parent).logical_len + 1))
                child = f"f{i}"
                pool.fork(parent, child, prefix)
                live.append(child)
        except CapacityExhausted:
            pass
        census = pool.census()
        assert census.conserved, census


def test_single_threaded_replay_is_deterministic():
    def script():
        pool = PagePool(32, page_size=16)
        pool.reserve("a", 40)
        pool.reserve("b", 17)
        pool.table("a").logical_len = 40
        pool.free("b")
        pool.grow("a", 64)
        pool.fork("a", "c", 32)
        return pool.dump()

    assert script() == script()


def test_dump_shape():
    pool = PagePool(8, page_size=16)
    pool.reserve("a", 20)
    dump = pool.dump()
    assert dump["page_size"] == 16
    assert dump["census"]["live_pages"] == 2
    assert dump["tables"]["'a'"]["entries"] == list(pool.table("a").entries)
