"""Global K/V buffers addressed by physical page, plus jagged-batch views.

One store holds a dense keys array and a dense values array with one row per
token slot (`capacity_pages * page_size` rows, each `head_count x head_dim`).
Rows are written through a sequence's block table, so logically adjacent
tokens may live on scattered pages. Multiple stores (e.g. one per transformer
layer) can attach to a single pool; page copies triggered by fork or
copy-on-write are mirrored into every attached store.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import OutOfRange, ShapeMismatch
from .pool import PagePool


@dataclass
class BatchView:
    """Flattened jagged-batch metadata: the two auxiliary index vectors.

    `slot_seq` gives the sequence ordinal of every flat KV slot and
    `prefix_sums` the exclusive prefix sum of per-sequence lengths, so
    ordinal -> first flat position. `ids` maps ordinals back to caller
    sequence identifiers.
    """

    ids: list
    lengths: np.ndarray
    prefix_sums: np.ndarray
    slot_seq: np.ndarray = field(repr=False)

    @classmethod
    def from_lengths(cls, lengths, ids=None) -> "BatchView":
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.ndim != 1 or (lengths < 0).any():
            raise ValueError("lengths must be a 1-D vector of non-negative ints")
        if ids is None:
            ids = list(range(len(lengths)))
        if len(ids) != len(lengths):
            raise ShapeMismatch(f"{len(ids)} ids for {len(lengths)} lengths")
        prefix = np.zeros(len(lengths), dtype=np.int64)
        np.cumsum(lengths[:-1], out=prefix[1:])
        slot_seq = np.repeat(np.arange(len(lengths), dtype=np.int64), lengths)
        return cls(ids=list(ids), lengths=lengths, prefix_sums=prefix, slot_seq=slot_seq)

    @property
    def total_slots(self) -> int:
        return int(self.slot_seq.shape[0])

    @cached_property
    def slot_local(self) -> np.ndarray:
        """Local position within its own sequence, for every flat slot."""
        return np.arange(self.total_slots, dtype=np.int64) - self.prefix_sums[self.slot_seq]


class KvStore:
    """Dense K and V row storage behind a page pool.

    Rows belonging to never-allocated pages are zero-initialized and never
    read through the public operations.
    """

    def __init__(self, pool: PagePool, head_count: int, head_dim: int, dtype=np.float32):
        if head_count <= 0 or head_dim <= 0:
            raise ValueError("head_count and head_dim must be positive")
        self.pool = pool
        self.head_count = head_count
        self.head_dim = head_dim
        rows = pool.capacity_pages * pool.page_size
        self.keys = np.zeros((rows, head_count, head_dim), dtype=dtype)
        self.values = np.zeros((rows, head_count, head_dim), dtype=dtype)
        pool.attach_store(self)

    @property
    def page_size(self) -> int:
        return self.pool.page_size

    # -- pool callback -------------------------------------------------------

    def copy_rows(self, src_page: int, dst_page: int, rows: int) -> None:
        """Replicate the first `rows` slots of one page into another and clear
        the destination's remaining slots."""
        src = src_page * self.page_size
        dst = dst_page * self.page_size
        self.keys[dst : dst + rows] = self.keys[src : src + rows]
        self.values[dst : dst + rows] = self.values[src : src + rows]
        self.keys[dst + rows : dst + self.page_size] = 0
        self.values[dst + rows : dst + self.page_size] = 0

    def clear_pages(self, pages) -> None:
        """Zero freshly granted pages so no previous owner's rows leak."""
        for page in pages:
            start = page * self.page_size
            self.keys[start : start + self.page_size] = 0
            self.values[start : start + self.page_size] = 0

    # -- row addressing --------------------------------------------------------

    def row_indices(self, seq_id, length: int) -> np.ndarray:
        """Store row index of logical positions 0..length-1, in logical order."""
        table = self.pool.table(seq_id)
        if length < 0 or length > table.capacity(self.page_size):
            raise OutOfRange(
                f"length {length} exceeds reserved capacity of sequence {seq_id!r}"
            )
        positions = np.arange(length, dtype=np.int64)
        entries = np.asarray(table.entries, dtype=np.int64)
        return entries[positions // self.page_size] * self.page_size + positions % self.page_size

    # -- operations ---------------------------------------------------------------

    def assign(self, seq_id, positions, k_new, v_new) -> None:
        """Write K/V rows at the given logical positions.

        Positions must already be reserved (grow first); overwriting a
        position is legal and last-write-wins. Writing into a page shared by a
        fork privatizes that page first, so sharers never observe the write.
        """
        table = self.pool.table(seq_id)
        positions = np.asarray(positions, dtype=np.int64)
        k_new = np.asarray(k_new)
        v_new = np.asarray(v_new)
        expected = (positions.shape[0], self.head_count, self.head_dim)
        if positions.ndim != 1:
            raise ShapeMismatch(f"positions must be 1-D, got shape {positions.shape}")
        if k_new.shape != expected or v_new.shape != expected:
            raise ShapeMismatch(
                f"expected K/V rows of shape {expected}, got {k_new.shape} and {v_new.shape}"
            )
        if positions.size == 0:
            return
        capacity = table.capacity(self.page_size)
        if positions.min() < 0 or positions.max() >= capacity:
            raise OutOfRange(
                f"positions outside reserved capacity {capacity} of sequence "
                f"{seq_id!r}; grow the table first"
            )
        # Copy-on-write before any slot of a shared page is touched.
        for block in np.unique(positions // self.page_size):
            self.pool.privatize(seq_id, int(block))
        entries = np.asarray(table.entries, dtype=np.int64)
        rows = entries[positions // self.page_size] * self.page_size + positions % self.page_size
        self.keys[rows] = k_new
        self.values[rows] = v_new
        table.logical_len = max(table.logical_len, int(positions.max()) + 1)

    def gather(self, seq_id, length: int) -> tuple[np.ndarray, np.ndarray]:
        """Materialize contiguous K/V copies for logical positions 0..length-1."""
        table = self.pool.table(seq_id)
        if length < 0 or length > table.logical_len:
            raise OutOfRange(
                f"length {length} exceeds valid tokens {table.logical_len} "
                f"of sequence {seq_id!r}"
            )
        rows = self.row_indices(seq_id, length)
        return self.keys[rows], self.values[rows]

    def batch_view(self, seq_ids, lengths=None) -> BatchView:
        """Flat view concatenating the given sequences in order."""
        tables = [self.pool.table(seq_id) for seq_id in seq_ids]
        if lengths is None:
            lengths = [t.logical_len for t in tables]
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (len(tables),):
            raise ShapeMismatch(f"{lengths.shape[0]} lengths for {len(tables)} sequences")
        for table, length in zip(tables, lengths):
            if length < 0 or length > table.logical_len:
                raise OutOfRange(
                    f"length {int(length)} exceeds valid tokens {table.logical_len} "
                    f"of sequence {table.seq_id!r}"
                )
        return BatchView.from_lengths(lengths, ids=list(seq_ids))

    def view_row_indices(self, view: BatchView) -> np.ndarray:
        """Store row index for every flat slot of a batch view."""
        if view.total_slots == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(
            [self.row_indices(seq_id, int(n)) for seq_id, n in zip(view.ids, view.lengths)]
        )

    def gather_view(self, view: BatchView) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous K/V copies for a whole batch view (flat, seq-major)."""
        rows = self.view_row_indices(view)
        return self.keys[rows], self.values[rows]

    def dump_sequence(self, seq_id, length: int | None = None) -> dict:
        """JSON-able K/V rows of one sequence, for golden tests."""
        if length is None:
            length = self.pool.table(seq_id).logical_len
        keys, values = self.gather(seq_id, length)
        return {
            "seq_id": repr(seq_id),
            "length": int(length),
            "keys": keys.astype(np.float64).reshape(length, -1).tolist(),
            "values": values.astype(np.float64).reshape(length, -1).tolist(),
        }
