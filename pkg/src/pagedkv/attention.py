"""Exact scaled-dot-product attention over scattered KV pages.

The kernel walks (query-block, kv-block) tiles of the flattened jagged batch,
skipping tiles that a precomputed block mask proves empty, and maintains a
running-max streaming softmax so tile skipping composes with numerical
stability. Reduction order is fixed (kv blocks ascending, GEMM within a
block), so the same logical content produces identical output regardless of
where pages physically live.

`reference_attention` is the independent dense oracle: textbook masked
softmax(Q K^T * scale) V with 64-bit accumulation, no tiling, no streaming.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
import math

import numpy as np

from .errors import NoAllowedKeys, OutOfRange, ShapeMismatch
from .store import BatchView, KvStore


class BlockKind(IntEnum):
    EMPTY = 0
    PARTIAL = 1
    FULL = 2


@dataclass
class AttentionConfig:
    head_count: int
    head_dim: int
    scale: float | None = None
    causal: bool = True
    page_size: int = 64

    def __post_init__(self):
        if self.head_count <= 0 or self.head_dim <= 0:
            raise ValueError("head_count and head_dim must be positive")
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ValueError("page_size must be a positive power of two")
        if self.scale is None:
            self.scale = 1.0 / math.sqrt(self.head_dim)
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass
class MaskMeta:
    """Query-side addressing against a KV batch view.

    `q_seq` holds the sequence ordinal of each flat query (must be
    non-decreasing, like the view itself) and `q_pos` its absolute position
    within that sequence.
    """

    view: BatchView
    q_seq: np.ndarray
    q_pos: np.ndarray

    def __post_init__(self):
        self.q_seq = np.asarray(self.q_seq, dtype=np.int64)
        self.q_pos = np.asarray(self.q_pos, dtype=np.int64)
        if self.q_seq.shape != self.q_pos.shape or self.q_seq.ndim != 1:
            raise ShapeMismatch("q_seq and q_pos must be 1-D vectors of equal length")
        if self.q_seq.size:
            if (np.diff(self.q_seq) < 0).any():
                raise ValueError("q_seq must be non-decreasing (sequence-major order)")
            if self.q_seq.min() < 0 or self.q_seq.max() >= len(self.view.lengths):
                raise OutOfRange("q_seq refers to a sequence outside the view")
            if (self.q_pos < 0).any() or (self.q_pos >= self.view.lengths[self.q_seq]).any():
                raise OutOfRange("query positions must be < their sequence length")

    @property
    def query_count(self) -> int:
        return int(self.q_seq.shape[0])

    @classmethod
    def self_attention(cls, view: BatchView) -> "MaskMeta":
        """One query per KV slot, aligned with the view."""
        return cls(view=view, q_seq=view.slot_seq.copy(), q_pos=view.slot_local.copy())

    @classmethod
    def decode(cls, view: BatchView) -> "MaskMeta":
        """One query per sequence, at its last valid position."""
        n = len(view.lengths)
        if (view.lengths <= 0).any():
            raise OutOfRange("decode meta requires every sequence to have length >= 1")
        return cls(
            view=view,
            q_seq=np.arange(n, dtype=np.int64),
            q_pos=view.lengths - 1,
        )

    @classmethod
    def suffix(cls, view: BatchView, q_lengths) -> "MaskMeta":
        """The trailing `q_lengths[s]` positions of each sequence as queries."""
        q_lengths = np.asarray(q_lengths, dtype=np.int64)
        if q_lengths.shape != view.lengths.shape:
            raise ShapeMismatch("one query count per sequence required")
        if (q_lengths < 0).any() or (q_lengths > view.lengths).any():
            raise OutOfRange("query counts must be within sequence lengths")
        q_seq = np.repeat(np.arange(len(q_lengths), dtype=np.int64), q_lengths)
        q_pos = np.concatenate(
            [np.arange(n - q, n, dtype=np.int64) for n, q in zip(view.lengths, q_lengths)]
        ) if q_lengths.sum() else np.zeros(0, dtype=np.int64)
        return cls(view=view, q_seq=q_seq, q_pos=q_pos)


def mask_allow(q_index: int, k_index: int, meta: MaskMeta, causal: bool = True) -> bool:
    """Pointwise mask predicate over flat query/KV indices.

    Allowed iff the slots belong to the same sequence, the key lies within
    that sequence's valid length, and (when causal) the key's local position
    does not exceed the query's.
    """
    if q_index < 0 or q_index >= meta.query_count:
        raise OutOfRange(f"query index {q_index} outside flat query batch")
    view = meta.view
    if k_index < 0 or k_index >= view.total_slots:
        raise OutOfRange(f"kv index {k_index} outside flat batch of {view.total_slots}")
    q_seq = int(meta.q_seq[q_index])
    k_seq = int(view.slot_seq[k_index])
    if q_seq != k_seq:
        return False
    k_local = int(view.slot_local[k_index])
    if k_local >= int(view.lengths[k_seq]):
        return False
    if causal and k_local > int(meta.q_pos[q_index]):
        return False
    return True


@dataclass
class BlockMask:
    """FULL/PARTIAL/EMPTY classification per (query-block, kv-block) tile."""

    kinds: np.ndarray = field(repr=False)
    page_size: int
    q_len: int
    kv_len: int

    def kind(self, q_block: int, k_block: int) -> BlockKind:
        return BlockKind(int(self.kinds[q_block, k_block]))

    def counts(self) -> dict:
        return {
            "empty": int((self.kinds == BlockKind.EMPTY).sum()),
            "partial": int((self.kinds == BlockKind.PARTIAL).sum()),
            "full": int((self.kinds == BlockKind.FULL).sum()),
        }


def _allow_grid(meta: MaskMeta, q0: int, q1: int, k0: int, k1: int, causal: bool) -> np.ndarray:
    """Vectorized mask predicate over one (query, kv) tile."""
    view = meta.view
    q_seq = meta.q_seq[q0:q1]
    q_pos = meta.q_pos[q0:q1]
    k_seq = view.slot_seq[k0:k1]
    k_local = view.slot_local[k0:k1]
    allow = q_seq[:, None] == k_seq[None, :]
    allow &= k_local[None, :] < view.lengths[k_seq][None, :]
    if causal:
        allow &= k_local[None, :] <= q_pos[:, None]
    return allow


def build_block_mask(meta: MaskMeta, config: AttentionConfig) -> BlockMask:
    """Classify every tile; EMPTY tiles are skippable with zero output effect."""
    bs = config.page_size
    q_len = meta.query_count
    kv_len = meta.view.total_slots
    n_qb = -(-q_len // bs) if q_len else 0
    n_kb = -(-kv_len // bs) if kv_len else 0
    kinds = np.zeros((n_qb, n_kb), dtype=np.int8)
    view = meta.view
    for qb in range(n_qb):
        q0, q1 = qb * bs, min((qb + 1) * bs, q_len)
        q_seq_lo, q_seq_hi = int(meta.q_seq[q0]), int(meta.q_seq[q1 - 1])
        for kb in range(n_kb):
            k0, k1 = kb * bs, min((kb + 1) * bs, kv_len)
            k_seq_lo, k_seq_hi = int(view.slot_seq[k0]), int(view.slot_seq[k1 - 1])
            if q_seq_hi < k_seq_lo or k_seq_hi < q_seq_lo:
                continue  # no shared sequence: EMPTY
            if q_seq_lo == q_seq_hi == k_seq_lo == k_seq_hi:
                # Single shared sequence: resolve by local-position extremes.
                k_lo = int(view.slot_local[k0])
                k_hi = int(view.slot_local[k1 - 1])
                if not config.causal:
                    kinds[qb, kb] = BlockKind.FULL
                    continue
                p_lo = int(meta.q_pos[q0:q1].min())
                p_hi = int(meta.q_pos[q0:q1].max())
                if k_hi <= p_lo:
                    kinds[qb, kb] = BlockKind.FULL
                    continue
                if k_lo > p_hi:
                    continue  # every key is in the future: EMPTY
            grid = _allow_grid(meta, q0, q1, k0, k1, config.causal)
            hits = int(grid.sum())
            if hits == 0:
                kinds[qb, kb] = BlockKind.EMPTY
            elif hits == grid.size:
                kinds[qb, kb] = BlockKind.FULL
            else:
                kinds[qb, kb] = BlockKind.PARTIAL
    return BlockMask(kinds=kinds, page_size=bs, q_len=q_len, kv_len=kv_len)


@dataclass
class KernelStats:
    """Per-run instrumentation: tile traversal and exact MAC accounting."""

    visited_blocks: int = 0
    skipped_blocks: int = 0
    allowed_pairs: int = 0
    head_count: int = 0
    head_dim: int = 0

    @property
    def attention_flops(self) -> int:
        # 2 flops per multiply-add, QK^T plus AV, per head.
        return 4 * self.head_count * self.head_dim * self.allowed_pairs


class _PagedSource:
    """Reads KV tiles straight from the store; single-page tiles are zero-copy."""

    def __init__(self, store: KvStore, rows: np.ndarray):
        self._store = store
        self._rows = rows

    def load(self, k0: int, k1: int) -> tuple[np.ndarray, np.ndarray]:
        rows = self._rows[k0:k1]
        first = int(rows[0])
        if int(rows[-1]) - first == k1 - k0 - 1 and np.array_equal(
            rows, np.arange(first, first + (k1 - k0))
        ):
            return self._store.keys[first : first + (k1 - k0)], self._store.values[
                first : first + (k1 - k0)
            ]
        return self._store.keys[rows], self._store.values[rows]


class _DenseSource:
    """Reads KV tiles from pre-gathered contiguous arrays."""

    def __init__(self, keys: np.ndarray, values: np.ndarray):
        self._keys = keys
        self._values = values

    def load(self, k0: int, k1: int) -> tuple[np.ndarray, np.ndarray]:
        return self._keys[k0:k1], self._values[k0:k1]


def _streaming_attention(
    queries: np.ndarray,
    source,
    meta: MaskMeta,
    config: AttentionConfig,
    stats: KernelStats | None,
    block_mask: BlockMask | None,
    skip_empty: bool,
) -> np.ndarray:
    h, d = config.head_count, config.head_dim
    q_len = queries.shape[0]
    kv_len = meta.view.total_slots
    compute_dtype = np.dtype(np.float32) if queries.dtype == np.float16 else queries.dtype
    out = np.zeros((q_len, h, d), dtype=compute_dtype)
    if q_len == 0:
        return out
    if block_mask is None:
        block_mask = build_block_mask(meta, config)
    if stats is not None:
        stats.head_count, stats.head_dim = h, d
    bs = config.page_size
    n_kb = block_mask.kinds.shape[1]
    scale = compute_dtype.type(config.scale)
    for qb in range(block_mask.kinds.shape[0]):
        q0, q1 = qb * bs, min((qb + 1) * bs, q_len)
        bq = q1 - q0
        qh = np.ascontiguousarray(
            queries[q0:q1].astype(compute_dtype, copy=False).transpose(1, 0, 2)
        )  # (h, bq, d)
        running_max = np.full((h, bq), -np.inf, dtype=compute_dtype)
        denom = np.zeros((h, bq), dtype=compute_dtype)
        acc = np.zeros((h, bq, d), dtype=compute_dtype)
        for kb in range(n_kb):
            kind = block_mask.kinds[qb, kb]
            if kind == BlockKind.EMPTY and skip_empty:
                if stats is not None:
                    stats.skipped_blocks += 1
                continue
            k0, k1 = kb * bs, min((kb + 1) * bs, kv_len)
            keys, values = source.load(k0, k1)
            kh = keys.astype(compute_dtype, copy=False).transpose(1, 2, 0)  # (h, d, bk)
            scores = (qh @ kh) * scale  # (h, bq, bk)
            if kind == BlockKind.FULL:
                pairs = bq * (k1 - k0)
            else:
                allow = _allow_grid(meta, q0, q1, k0, k1, config.causal)
                scores = np.where(allow[None, :, :], scores, -np.inf)
                pairs = int(allow.sum())
            if stats is not None:
                stats.visited_blocks += 1
                stats.allowed_pairs += pairs
            block_max = scores.max(axis=2)
            new_max = np.maximum(running_max, block_max)
            dead = np.isneginf(new_max)  # rows that still saw no allowed key
            with np.errstate(invalid="ignore"):
                correction = np.where(
                    np.isneginf(running_max), 0.0, np.exp(running_max - new_max)
                ).astype(compute_dtype, copy=False)
                probs = np.where(
                    dead[:, :, None], 0.0, np.exp(scores - new_max[:, :, None])
                ).astype(compute_dtype, copy=False)
            denom = denom * correction + probs.sum(axis=2)
            vh = values.astype(compute_dtype, copy=False).transpose(1, 0, 2)  # (h, bk, d)
            acc = acc * correction[:, :, None] + probs @ vh
            running_max = new_max
        starved = denom[0] == 0
        if starved.any():
            bad = (q0 + np.nonzero(starved)[0]).tolist()
            raise NoAllowedKeys(f"queries {bad} have zero allowed keys")
        out[q0:q1] = (acc / denom[:, :, None]).transpose(1, 0, 2)
    return out


def paged_attention(
    queries,
    store: KvStore,
    meta: MaskMeta,
    config: AttentionConfig,
    *,
    stats: KernelStats | None = None,
    block_mask: BlockMask | None = None,
    skip_empty: bool = True,
) -> np.ndarray:
    """Exact attention computed directly over scattered pages.

    `queries` is a flat (n_queries, head_count, head_dim) batch laid out like
    `meta`. Rows are fetched through each sequence's block table, so the
    result is independent of physical page placement.
    """
    queries = _check_queries(queries, meta, config)
    if store.head_count != config.head_count or store.head_dim != config.head_dim:
        raise ShapeMismatch("store head layout does not match attention config")
    rows = store.view_row_indices(meta.view)
    return _streaming_attention(
        queries, _PagedSource(store, rows), meta, config, stats, block_mask, skip_empty
    )


def gathered_attention(
    queries,
    keys,
    values,
    meta: MaskMeta,
    config: AttentionConfig,
    *,
    stats: KernelStats | None = None,
    block_mask: BlockMask | None = None,
    skip_empty: bool = True,
) -> np.ndarray:
    """Same streaming kernel over pre-gathered contiguous K/V (must agree
    bit-for-bit with the paged path on identical logical content)."""
    queries = _check_queries(queries, meta, config)
    keys = np.asarray(keys)
    values = np.asarray(values)
    expected = (meta.view.total_slots, config.head_count, config.head_dim)
    if keys.shape != expected or values.shape != expected:
        raise ShapeMismatch(f"expected K/V of shape {expected}, got {keys.shape}/{values.shape}")
    return _streaming_attention(
        queries, _DenseSource(keys, values), meta, config, stats, block_mask, skip_empty
    )


def _check_queries(queries, meta: MaskMeta, config: AttentionConfig) -> np.ndarray:
    queries = np.asarray(queries)
    expected = (meta.query_count, config.head_count, config.head_dim)
    if queries.shape != expected:
        raise ShapeMismatch(f"expected queries of shape {expected}, got {queries.shape}")
    return queries


def reference_attention(
    queries,
    keys,
    values,
    lengths,
    *,
    causal: bool = True,
    scale: float | None = None,
    q_lengths=None,
) -> np.ndarray:
    """Dense O(N^2) oracle over contiguous per-sequence K/V.

    Straight two-pass masked softmax with float64 accumulation. `q_lengths[s]`
    trailing positions of each sequence act as queries (default: all of them).
    Returns float64 rows, one per query.
    """
    queries = np.asarray(queries)
    keys = np.asarray(keys)
    values = np.asarray(values)
    if queries.ndim != 3 or keys.shape != values.shape or keys.ndim != 3:
        raise ShapeMismatch("queries/keys/values must be (rows, heads, head_dim)")
    if keys.shape[1:] != queries.shape[1:]:
        raise ShapeMismatch("queries and keys disagree on head layout")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.sum() != keys.shape[0]:
        raise ShapeMismatch("lengths do not add up to the KV row count")
    if q_lengths is None:
        q_lengths = lengths.copy()
    q_lengths = np.asarray(q_lengths, dtype=np.int64)
    if q_lengths.shape != lengths.shape or (q_lengths < 0).any() or (q_lengths > lengths).any():
        raise ShapeMismatch("q_lengths must give 0 <= q_len <= len per sequence")
    if q_lengths.sum() != queries.shape[0]:
        raise ShapeMismatch("q_lengths do not add up to the query row count")
    head_dim = queries.shape[2]
    if scale is None:
        scale = 1.0 / math.sqrt(head_dim)

    out = np.zeros(queries.shape, dtype=np.float64)
    q_start = 0
    k_start = 0
    for n, qn in zip(lengths.tolist(), q_lengths.tolist()):
        if qn:
            q = queries[q_start : q_start + qn].astype(np.float64).transpose(1, 0, 2)
            k = keys[k_start : k_start + n].astype(np.float64).transpose(1, 2, 0)
            v = values[k_start : k_start + n].astype(np.float64).transpose(1, 0, 2)
            q_pos = np.arange(n - qn, n)
            scores = (q @ k) * scale  # (h, qn, n)
            if causal:
                allow = np.arange(n)[None, :] <= q_pos[:, None]
                if not allow.any(axis=1).all():
                    raise NoAllowedKeys("a query row has zero allowed keys")
                scores = np.where(allow[None, :, :], scores, -np.inf)
            row_max = scores.max(axis=2, keepdims=True)
            probs = np.exp(scores - row_max)
            probs /= probs.sum(axis=2, keepdims=True)
            out[q_start : q_start + qn] = (probs @ v).transpose(1, 0, 2)
        q_start += qn
        k_start += n
    return out


def attention_weights(
    queries,
    store: KvStore,
    meta: MaskMeta,
    config: AttentionConfig,
) -> np.ndarray:
    """Instrumented mode: materialize the (n_queries, heads, kv_slots) softmax
    weight matrix over the paged KV content, two-pass in float64.

    Diagnostic only; lets tests check that rows sum to 1 over allowed keys and
    that disallowed keys carry exactly zero weight.
    """
    queries = _check_queries(queries, meta, config)
    keys, _ = store.gather_view(meta.view)
    q = queries.astype(np.float64)
    k = keys.astype(np.float64)
    scores = np.einsum("qhd,khd->qhk", q, k) * config.scale
    allow = _allow_grid(meta, 0, meta.query_count, 0, meta.view.total_slots, config.causal)
    scores = np.where(allow[:, None, :], scores, -np.inf)
    row_max = scores.max(axis=2, keepdims=True)
    if np.isneginf(row_max).any():
        raise NoAllowedKeys("a query row has zero allowed keys")
    probs = np.exp(scores - row_max)
    probs /= probs.sum(axis=2, keepdims=True)
    return np.where(allow[:, None, :], probs, 0.0)
