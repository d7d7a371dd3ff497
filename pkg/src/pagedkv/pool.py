"""Page-granular memory manager for KV caches.

Physical storage is carved into fixed-size pages (a power-of-two number of
token slots). Each sequence owns a block table mapping logical block index to
physical page id, so sequences can grow on demand without contiguous
reservations. Freed pages go to a LIFO stack and are reused before the bump
cursor touches never-used storage.

Allocation is designed to stay off the critical path: page grants come from a
GIL-atomic deque pop or a GIL-atomic counter bump, with no lock held across a
multi-page reservation. Reference counts (needed only for prefix sharing) are
the one piece of state mutated under a short mutex, because CPython offers no
atomic integer add; every critical section is O(1) and independent of how many
sequences are live.
"""

from __future__ import annotations

import itertools
import threading
from array import array
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import (
    CapacityExhausted,
    DuplicateSequence,
    InvalidPrefix,
    OutOfRange,
    UnknownSequence,
)

# Block-table entries are 32-bit, which bounds how many pages one pool may own.
MAX_POOL_PAGES = 1 << 32


@dataclass(frozen=True)
class PageAddress:
    """Physical location of one token slot."""

    page_id: int
    offset: int

    def flat(self, page_size: int) -> int:
        return self.page_id * page_size + self.offset


class BlockTable:
    """Per-sequence ordered list of physical page ids.

    `logical_len` counts tokens actually written; `entries` may run ahead of
    it by whatever capacity was reserved for upcoming writes.
    """

    __slots__ = ("seq_id", "entries", "logical_len")

    def __init__(self, seq_id):
        self.seq_id = seq_id
        self.entries = array("I")
        self.logical_len = 0

    def capacity(self, page_size: int) -> int:
        return len(self.entries) * page_size

    def __repr__(self) -> str:
        return (
            f"BlockTable(seq_id={self.seq_id!r}, pages={list(self.entries)}, "
            f"logical_len={self.logical_len})"
        )


@dataclass(frozen=True)
class PoolCensus:
    """Page population broken down by state; live + free + never == capacity."""

    capacity_pages: int
    live_pages: int
    free_pages: int
    never_allocated: int

    @property
    def conserved(self) -> bool:
        return self.live_pages + self.free_pages + self.never_allocated == self.capacity_pages


class PagePool:
    """Owns physical pages, their reference counts, and all block tables.

    Thread-safety contract: reserve/grow/free/fork may be called concurrently
    from many workers, but each block table has exactly one owner at a time.
    `translate` is read-only and safe against a quiescent table.
    """

    def __init__(self, capacity_pages: int, page_size: int = 64):
        if capacity_pages <= 0 or capacity_pages > MAX_POOL_PAGES:
            raise ValueError(
                f"capacity_pages must be in [1, 2^32], got {capacity_pages}"
            )
        if page_size <= 0 or page_size & (page_size - 1):
            raise ValueError(f"page_size must be a positive power of two, got {page_size}")
        self.page_size = page_size
        self.capacity_pages = capacity_pages
        self._free: deque[int] = deque()
        self._bump = itertools.count()
        self._refcount = np.zeros(capacity_pages, dtype=np.int64)
        self._ref_lock = threading.Lock()
        self._tables: dict[object, BlockTable] = {}
        self._stores: list = []

    # -- storage hookup ----------------------------------------------------

    def attach_store(self, store) -> None:
        """Register a KV store whose rows must follow page copies (fork, CoW)."""
        self._stores.append(store)

    def _copy_rows(self, src_page: int, dst_page: int, rows: int) -> None:
        for store in self._stores:
            store.copy_rows(src_page, dst_page, rows)

    def _clear_pages(self, pages) -> None:
        # Recycled pages must not leak previous owners' rows: a gather may read
        # positions below logical_len that were never assigned.
        for store in self._stores:
            store.clear_pages(pages)

    # -- page grants ---------------------------------------------------------

    def _take_page(self) -> int | None:
        try:
            return self._free.pop()
        except IndexError:
            pass
        page = next(self._bump)
        return page if page < self.capacity_pages else None

    def _take_pages(self, count: int) -> list[int]:
        taken: list[int] = []
        for _ in range(count):
            page = self._take_page()
            if page is None:
                # Atomic failure: return whatever was taken before erroring.
                self._free.extend(taken)
                raise CapacityExhausted(
                    f"pool cannot supply {count} pages "
                    f"({len(self._free)} free, bump at {self.bump_cursor}/{self.capacity_pages})"
                )
            taken.append(page)
        return taken

    # -- sequence lifecycle --------------------------------------------------

    def reserve(self, seq_id, length: int) -> list[int]:
        """Create a block table with capacity for `length` tokens.

        Reservation provisions capacity only; `logical_len` starts at 0 and
        advances as K/V rows are assigned.
        """
        if length < 0:
            raise ValueError(f"length must be non-negative, got {length}")
        table = BlockTable(seq_id)
        if self._tables.setdefault(seq_id, table) is not table:
            raise DuplicateSequence(f"sequence {seq_id!r} already has a block table")
        try:
            pages = self._take_pages(self.pages_for(length))
        except CapacityExhausted:
            del self._tables[seq_id]
            raise
        for page in pages:
            self._refcount[page] = 1  # not yet visible to any other worker
        self._clear_pages(pages)
        table.entries.extend(pages)
        return pages

    def grow(self, seq_id, new_len: int) -> list[int]:
        """Extend a table to hold `new_len` tokens; no-op if already covered."""
        table = self._get_table(seq_id)
        needed = self.pages_for(new_len) - len(table.entries)
        if needed <= 0:
            return []
        pages = self._take_pages(needed)
        for page in pages:
            self._refcount[page] = 1
        self._clear_pages(pages)
        table.entries.extend(pages)
        return pages

    def free(self, seq_id) -> int:
        """Drop a sequence's table and reclaim pages that lost their last reference.

        Returns the number of pages actually reclaimed (shared pages stay live
        while another sequence still references them).
        """
        try:
            table = self._tables.pop(seq_id)
        except KeyError:
            raise UnknownSequence(f"no block table for sequence {seq_id!r}") from None
        return self._release_pages(table.entries)

    def fork(self, parent_seq, child_seq, prefix_len: int) -> BlockTable:
        """Create a child table sharing the parent's prefix.

        Full pages of the prefix are shared by reference count; a trailing
        partial page is deep-copied so later child writes never touch parent
        data. Shared pages are copy-on-write from then on.
        """
        parent = self._get_table(parent_seq)
        if prefix_len < 0:
            raise ValueError(f"prefix_len must be non-negative, got {prefix_len}")
        if prefix_len > parent.logical_len:
            raise InvalidPrefix(
                f"prefix {prefix_len} exceeds parent length {parent.logical_len}"
            )
        child = BlockTable(child_seq)
        if self._tables.setdefault(child_seq, child) is not child:
            raise DuplicateSequence(f"sequence {child_seq!r} already has a block table")
        full_blocks, remainder = divmod(prefix_len, self.page_size)
        copy_page: int | None = None
        if remainder:
            try:
                copy_page = self._take_pages(1)[0]
            except CapacityExhausted:
                del self._tables[child_seq]
                raise
        shared = parent.entries[:full_blocks]
        with self._ref_lock:
            for page in shared:
                self._refcount[page] += 1
        child.entries.extend(shared)
        if copy_page is not None:
            self._refcount[copy_page] = 1
            self._copy_rows(parent.entries[full_blocks], copy_page, remainder)
            child.entries.append(copy_page)
        child.logical_len = prefix_len
        return child

    def privatize(self, seq_id, block_idx: int) -> int | None:
        """Copy-on-write: give `seq_id` exclusive ownership of one block.

        Returns the fresh page id when a copy happened, None when the page was
        already private. Callers must privatize before writing any slot of a
        shared page.
        """
        table = self._get_table(seq_id)
        old = int(table.entries[block_idx])
        if self._refcount[old] <= 1:
            return None
        new = self._take_pages(1)[0]
        self._refcount[new] = 1
        self._copy_rows(old, new, self.page_size)
        table.entries[block_idx] = new
        self._release_pages([old])
        return new

    # -- addressing ------------------------------------------------------------

    def translate(self, seq_id, position: int) -> PageAddress:
        """Map a logical token position to its physical (page, offset)."""
        table = self._get_table(seq_id)
        block, offset = divmod(position, self.page_size)
        if position < 0 or block >= len(table.entries):
            raise OutOfRange(
                f"position {position} outside reserved capacity "
                f"{table.capacity(self.page_size)} of sequence {seq_id!r}"
            )
        return PageAddress(int(table.entries[block]), offset)

    def pages_for(self, length: int) -> int:
        return -(-length // self.page_size)

    # -- introspection -----------------------------------------------------------

    def table(self, seq_id) -> BlockTable:
        return self._get_table(seq_id)

    def has_sequence(self, seq_id) -> bool:
        return seq_id in self._tables

    def sequences(self) -> list:
        return list(self._tables)

    def page_refcount(self, page_id: int) -> int:
        return int(self._refcount[page_id])

    @property
    def bump_cursor(self) -> int:
        # itertools.count advances atomically under the GIL; __reduce__ exposes
        # the current value without consuming it.
        return min(self._bump.__reduce__()[1][0], self.capacity_pages)

    @property
    def free_page_count(self) -> int:
        return len(self._free)

    @property
    def available_pages(self) -> int:
        return len(self._free) + (self.capacity_pages - self.bump_cursor)

    def census(self) -> PoolCensus:
        """Walk the page population. Meaningful only on a quiescent pool."""
        return PoolCensus(
            capacity_pages=self.capacity_pages,
            live_pages=int(np.count_nonzero(self._refcount)),
            free_pages=len(self._free),
            never_allocated=self.capacity_pages - self.bump_cursor,
        )

    def dump(self) -> dict:
        """Deterministic census + table snapshot for golden tests."""
        census = self.census()
        return {
            "page_size": self.page_size,
            "capacity_pages": self.capacity_pages,
            "bump_cursor": self.bump_cursor,
            "free_stack": list(self._free),
            "census": {
                "live_pages": census.live_pages,
                "free_pages": census.free_pages,
                "never_allocated": census.never_allocated,
            },
            "tables": {
                repr(seq_id): {
                    "entries": list(self._tables[seq_id].entries),
                    "logical_len": self._tables[seq_id].logical_len,
                }
                for seq_id in sorted(self._tables, key=repr)
            },
        }

    # -- internals ----------------------------------------------------------------

    def _get_table(self, seq_id) -> BlockTable:
        try:
            return self._tables[seq_id]
        except KeyError:
            raise UnknownSequence(f"no block table for sequence {seq_id!r}") from None

    def _release_pages(self, pages) -> int:
        reclaimed = 0
        for page in pages:
            page = int(page)
            with self._ref_lock:
                self._refcount[page] -= 1
                dead = self._refcount[page] == 0
            if dead:
                self._free.append(page)
                reclaimed += 1
        return reclaimed
