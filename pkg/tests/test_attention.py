"""Attention kernel: mask predicate, block classification, oracle equivalence."""

import math

import numpy as np
import pytest

from pagedkv.attention import (
    AttentionConfig,
    BlockKind,
    KernelStats,
    MaskMeta,
    attention_weights,
    build_block_mask,
    gathered_attention,
    mask_allow,
    paged_attention,
    reference_attention,
)
from pagedkv.errors import NoAllowedKeys, OutOfRange, ShapeMismatch
from pagedkv.pool import PagePool
from pagedkv.store import BatchView, KvStore
from pagedkv.verify import build_attention_instance, relative_error


def small_meta(lengths, causal_positions=None):
    view = BatchView.from_lengths(lengths)
    return MaskMeta.self_attention(view)


# -- mask predicate -------------------------------------------------------------


def test_mask_allow_same_sequence_causal():
    meta = small_meta([6])
    # q at local 5, k at local 3: same sequence, past key -> allowed
    assert mask_allow(5, 3, meta, causal=True) is True
    # future key under causality
    assert mask_allow(3, 5, meta, causal=True) is False
    assert mask_allow(3, 5, meta, causal=False) is True


def test_mask_allow_cross_sequence_rejected():
    meta = small_meta([3, 3])
    assert mask_allow(0, 3, meta, causal=False) is False  # q in seq a, k in seq b
    assert mask_allow(4, 5, meta, causal=False) is True


def test_mask_allow_rejects_keys_beyond_valid_length():
    # Hand-built view with page-padded slots: 3 physical slots, 2 valid tokens.
    view = BatchView(
        ids=[0],
        lengths=np.array([2], dtype=np.int64),
        prefix_sums=np.array([0], dtype=np.int64),
        slot_seq=np.zeros(3, dtype=np.int64),
    )
    meta = MaskMeta(view=view, q_seq=np.array([0]), q_pos=np.array([1]))
    assert mask_allow(0, 1, meta, causal=True) is True
    assert mask_allow(0, 2, meta, causal=False) is False  # slot beyond lengths[0]


def test_mask_allow_index_bounds():
    meta = small_meta([4])
    with pytest.raises(OutOfRange):
        mask_allow(4, 0, meta)
    with pytest.raises(OutOfRange):
        mask_allow(0, 4, meta)


def test_mask_meta_validation():
    view = BatchView.from_lengths([4, 4])
    with pytest.raises(OutOfRange):
        MaskMeta(view=view, q_seq=np.array([0]), q_pos=np.array([4]))  # pos == length
    with pytest.raises(ValueError):
        MaskMeta(view=view, q_seq=np.array([1, 0]), q_pos=np.array([0, 0]))  # not sorted


# -- block classification -----------------------------------------------------------


def test_block_mask_two_sequences_block_aligned_noncausal():
    cfg = AttentionConfig(head_count=1, head_dim=8, causal=False, page_size=16)
    meta = small_meta([32, 32])
    mask = build_block_mask(meta, cfg)
    assert mask.kinds.shape == (4, 4)
    counts = mask.counts()
    assert counts["partial"] == 0  # per-sequence constant predicate
    expected = np.array(
        [[2, 2, 0, 0], [2, 2, 0, 0], [0, 0, 2, 2], [0, 0, 2, 2]], dtype=np.int8
    )
    assert np.array_equal(mask.kinds, expected)


def test_block_mask_causal_lower_triangle():
    cfg = AttentionConfig(head_count=1, head_dim=8, causal=True, page_size=16)
    meta = small_meta([48])  # 3 x page_size
    mask = build_block_mask(meta, cfg)
    assert [BlockKind(k) for k in np.diag(mask.kinds)] == [BlockKind.PARTIAL] * 3
    assert mask.kind(1, 0) == BlockKind.FULL and mask.kind(2, 0) == BlockKind.FULL
    assert mask.kind(0, 1) == BlockKind.EMPTY and mask.kind(0, 2) == BlockKind.EMPTY


@pytest.mark.parametrize("seed", range(6))
def test_block_mask_matches_exhaustive_predicate(seed):
    rng = np.random.default_rng(seed)
    n_seqs = int(rng.integers(1, 5))
    lengths = [int(rng.integers(1, 120)) for _ in range(n_seqs)]  # <= 512 slots total
    causal = bool(rng.integers(2))
    cfg = AttentionConfig(head_count=1, head_dim=8, causal=causal, page_size=16)
    meta = small_meta(lengths)
    mask = build_block_mask(meta, cfg)
    q_len, kv_len = meta.query_count, meta.view.total_slots
    for qb in range(mask.kinds.shape[0]):
        for kb in range(mask.kinds.shape[1]):
            hits = sum(
                mask_allow(q, k, meta, causal=causal)
                for q in range(qb * 16, min((qb + 1) * 16, q_len))
                for k in range(kb * 16, min((kb + 1) * 16, kv_len))
            )
            size = (min((qb + 1) * 16, q_len) - qb * 16) * (min((kb + 1) * 16, kv_len) - kb * 16)
            expected = (
                BlockKind.EMPTY if hits == 0 else BlockKind.FULL if hits == size else BlockKind.PARTIAL
            )
            assert mask.kind(qb, kb) == expected, (qb, kb)


# -- kernel behavior -----------------------------------------------------------------


def build_single(lengths, *, causal=True, page_size=16, heads=2, dim=4, seed=0, q_lengths=None):
    rng = np.random.default_rng(seed)
    return build_attention_instance(
        rng,
        lengths,
        head_count=heads,
        head_dim=dim,
        page_size=page_size,
        causal=causal,
        q_lengths=q_lengths,
    )


def test_single_allowed_key_returns_value_row_exactly():
    inst = build_single([1], causal=True, q_lengths=[1])
    out = inst.paged_output()
    assert np.array_equal(out[0], inst.values[0])  # softmax of a singleton is 1


def test_uniform_scores_average_value_rows():
    # identical keys -> identical scores -> arithmetic mean of values
    pool = PagePool(8, page_size=4)
    store = KvStore(pool, 1, 4)
    pool.reserve("a", 6)
    k = np.tile(np.array([[0.3, -0.2, 0.9, 0.0]], dtype=np.float32), (6, 1)).reshape(6, 1, 4)
    v = np.random.default_rng(1).standard_normal((6, 1, 4)).astype(np.float32)
    store.assign("a", np.arange(6), k, v)
    view = store.batch_view(["a"])
    meta = MaskMeta(view=view, q_seq=np.array([0]), q_pos=np.array([5]))
    cfg = AttentionConfig(head_count=1, head_dim=4, causal=True, page_size=4)
    q = np.random.default_rng(2).standard_normal((1, 1, 4)).astype(np.float32)
    out = paged_attention(q, store, meta, cfg)
    assert np.allclose(out[0, 0], v[:, 0, :].mean(axis=0), atol=1e-6)


@pytest.mark.parametrize("page_size", [16, 64, 128])
@pytest.mark.parametrize("causal", [True, False])
def test_random_instances_match_reference(page_size, causal):
    rng = np.random.default_rng(page_size + causal)
    lengths = [int(rng.integers(1, 300)) for _ in range(4)]
    inst = build_attention_instance(
        rng, lengths, head_count=4, head_dim=16, page_size=page_size, causal=causal
    )
    err = relative_error(inst.paged_output(), inst.reference_output())
    assert err <= 1e-5


def test_scatter_invariance_bit_identical():
    rng = np.random.default_rng(11)
    lengths = [37, 90]
    keys = rng.standard_normal((127, 2, 8)).astype(np.float32)
    values = rng.standard_normal((127, 2, 8)).astype(np.float32)
    queries = rng.standard_normal((127, 2, 8)).astype(np.float32)
    cfg = AttentionConfig(head_count=2, head_dim=8, causal=True, page_size=16)

    outs = []
    for scattered in (False, True):
        pool = PagePool(32, page_size=16)
        store = KvStore(pool, 2, 8)
        if scattered:
            pool.reserve("pad", 16 * 5)
        offset = 0
        for i, n in enumerate(lengths):
            pool.reserve(f"s{i}", n)
            store.assign(f"s{i}", np.arange(n), keys[offset : offset + n], values[offset : offset + n])
            offset += n
        if scattered:
            pool.free("pad")
            # force one sequence onto recycled pages in a different order
            pool.reserve("tail", 16 * 3)
        view = store.batch_view(["s0", "s1"], lengths)
        meta = MaskMeta.self_attention(view)
        outs.append(paged_attention(queries, store, meta, cfg))
    assert np.array_equal(outs[0], outs[1])


def test_gathered_path_and_skip_modes_agree_bitwise():
    inst = build_single([33, 50, 7], causal=True, page_size=16, seed=5)
    out = inst.paged_output()
    assert np.array_equal(out, inst.gathered_output())
    assert np.array_equal(out, inst.paged_output(skip_empty=False))


def test_causality_zeroing_future_value_changes_nothing():
    rng = np.random.default_rng(6)
    pool = PagePool(16, page_size=4)
    store = KvStore(pool, 2, 4)
    pool.reserve("a", 10)
    k = rng.standard_normal((10, 2, 4)).astype(np.float32)
    v = rng.standard_normal((10, 2, 4)).astype(np.float32)
    store.assign("a", np.arange(10), k, v)
    view = store.batch_view(["a"])
    meta = MaskMeta(view=view, q_seq=np.array([0]), q_pos=np.array([3]))
    cfg = AttentionConfig(head_count=2, head_dim=4, causal=True, page_size=4)
    q = rng.standard_normal((1, 2, 4)).astype(np.float32)
    before = paged_attention(q, store, meta, cfg)
    # zero a value row strictly in the query's future
    store.assign("a", [7], k[7:8], np.zeros((1, 2, 4), dtype=np.float32))
    after = paged_attention(q, store, meta, cfg)
    assert np.array_equal(before, after)


def test_instrumented_weights_sum_to_one_and_mask_zeroes():
    inst = build_single([20, 13], causal=True, page_size=16, seed=9, q_lengths=[5, 5])
    weights = attention_weights(inst.queries, inst.store, inst.meta, inst.config)
    assert np.allclose(weights.sum(axis=2), 1.0, atol=1e-6)
    # cross-sequence entries carry exactly zero weight
    assert np.all(weights[: 5, :, 20:] == 0.0)
    assert np.all(weights[5:, :, :20] == 0.0)


def test_flop_and_block_instrumentation():
    inst = build_single([40], causal=True, page_size=16, seed=3, q_lengths=[1])
    stats = KernelStats()
    inst.paged_output(stats=stats)
    assert stats.allowed_pairs == 40  # decode query attends the whole context
    assert stats.attention_flops == 4 * 2 * 4 * 40
    assert stats.visited_blocks == 3 and stats.skipped_blocks == 0


def test_no_allowed_keys_is_an_error():
    inst = build_single([8], causal=True, q_lengths=[1])
    inst.meta.view.lengths[0] = 0  # corrupt: every key now invalid
    with pytest.raises(NoAllowedKeys):
        inst.paged_output()


def test_shape_validation():
    inst = build_single([8], q_lengths=[2])
    with pytest.raises(ShapeMismatch):
        paged_attention(inst.queries[:1], inst.store, inst.meta, inst.config)
    with pytest.raises(ShapeMismatch):
        gathered_attention(inst.queries, inst.keys[:4], inst.values[:4], inst.meta, inst.config)


def test_half_precision_store_stays_accurate():
    rng = np.random.default_rng(13)
    pool = PagePool(16, page_size=16)
    store = KvStore(pool, 2, 8, dtype=np.float16)
    pool.reserve("a", 40)
    k = rng.standard_normal((40, 2, 8)).astype(np.float16)
    v = rng.standard_normal((40, 2, 8)).astype(np.float16)
    store.assign("a", np.arange(40), k, v)
    view = store.batch_view(["a"])
    meta = MaskMeta.self_attention(view)
    cfg = AttentionConfig(head_count=2, head_dim=8, causal=True, page_size=16)
    q = rng.standard_normal((40, 2, 8)).astype(np.float32)
    out = paged_attention(q, store, meta, cfg)
    assert out.dtype == np.float32
    gk, gv = store.gather("a", 40)
    ref = reference_attention(q, gk, gv, [40], causal=True)
    assert relative_error(out, ref) <= 1e-5


# -- reference oracle self-check ---------------------------------------------------


def naive_elementwise_attention(queries, keys, values, lengths, causal, scale):
    """Triple-loop float64 recomputation, independent of any vectorized path."""
    out = np.zeros(queries.shape, dtype=np.float64)
    start = 0
    for n in lengths:
        for qi in range(n):
            for h in range(queries.shape[1]):
                q = queries[start + qi, h].astype(np.float64)
                scores = []
                for ki in range(n):
                    if causal and ki > qi:
                        scores.append(-math.inf)
                    else:
                        scores.append(scale * float(np.dot(q, keys[start + ki, h].astype(np.float64))))
                m = max(scores)
                exps = [math.exp(s - m) for s in scores]
                den = sum(exps)
                acc = np.zeros(queries.shape[2], dtype=np.float64)
                for ki, w in enumerate(exps):
                    acc += (w / den) * values[start + ki, h].astype(np.float64)
                out[start + qi, h] = acc
        start += n
    return out


@pytest.mark.parametrize("seed", range(4))
def test_reference_matches_elementwise_recompute(seed):
    rng = np.random.default_rng(seed)
    lengths = [int(rng.integers(1, 7)) for _ in range(2)]
    total = sum(lengths)
    q = rng.standard_normal((total, 2, 3)).astype(np.float32)
    k = rng.standard_normal((total, 2, 3)).astype(np.float32)
    v = rng.standard_normal((total, 2, 3)).astype(np.float32)
    causal = bool(seed % 2)
    scale = 1.0 / math.sqrt(3)
    got = reference_attention(q, k, v, lengths, causal=causal, scale=scale)
    want = naive_elementwise_attention(q, k, v, lengths, causal, scale)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_reference_identity_cases():
    q = np.array([[[1.0, 2.0]]], dtype=np.float32)
    v = np.array([[[5.0, -3.0]]], dtype=np.float32)
    out = reference_attention(q, q, v, [1], causal=True)
    assert np.allclose(out, v)  # K == q, single key -> returns v

    # two keys with equal scores -> midpoint of the value rows
    k2 = np.zeros((2, 1, 2), dtype=np.float32)
    v2 = np.array([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=np.float32)
    q2 = np.array([[[0.7, -0.1]]], dtype=np.float32)
    out2 = reference_attention(q2, k2, v2, [2], causal=False, q_lengths=[1])
    assert np.allclose(out2[0, 0], [0.5, 0.5])
