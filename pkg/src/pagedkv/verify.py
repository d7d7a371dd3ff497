"""Self-verification: randomized equivalence checks against brute-force oracles.

Two oracles anchor everything here:

* `MirrorStore` keeps a plain contiguous copy of every sequence's K/V with
  value semantics (fork deep-copies the prefix). Any divergence between a
  paged gather and the mirror is an allocator or addressing bug.
* `reference_attention` recomputes attention densely in float64.

The same machinery backs the `verify` CLI subcommand and the acceptance test
suite, with deterministic seeding throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionConfig,
    KernelStats,
    MaskMeta,
    attention_weights,
    gathered_attention,
    paged_attention,
    reference_attention,
)
from .errors import CapacityExhausted, ConfigError, UnknownSequence
from .pool import PagePool
from .store import KvStore

ORACLE_REL_TOL = 1e-5

HEAD_COUNT_GRID = (1, 4, 8)
HEAD_DIM_GRID = (8, 16, 64)
PAGE_SIZE_GRID = (16, 64, 128)


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Max absolute difference normalized by the oracle's own max magnitude."""
    denom = max(float(np.max(np.abs(expected))), 1e-30)
    return float(np.max(np.abs(actual.astype(np.float64) - expected))) / denom


class MirrorStore:
    """Independent contiguous K/V mirror with value semantics.

    No pages, no tables: per-sequence dense arrays, deep-copied on fork. The
    paged store must be indistinguishable from this through `gather`.
    """

    def __init__(self, head_count: int, head_dim: int, dtype=np.float32):
        self.head_count = head_count
        self.head_dim = head_dim
        self.dtype = dtype
        self._keys: dict = {}
        self._values: dict = {}
        self._lens: dict = {}

    def _blank(self, capacity: int) -> np.ndarray:
        return np.zeros((capacity, self.head_count, self.head_dim), dtype=self.dtype)

    def reserve(self, seq_id, capacity: int) -> None:
        assert seq_id not in self._keys
        self._keys[seq_id] = self._blank(capacity)
        self._values[seq_id] = self._blank(capacity)
        self._lens[seq_id] = 0

    def grow(self, seq_id, capacity: int) -> None:
        have = self._keys[seq_id].shape[0]
        if capacity > have:
            extra = capacity - have
            self._keys[seq_id] = np.concatenate([self._keys[seq_id], self._blank(extra)])
            self._values[seq_id] = np.concatenate([self._values[seq_id], self._blank(extra)])

    def assign(self, seq_id, positions, k_new, v_new) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        self._keys[seq_id][positions] = k_new
        self._values[seq_id][positions] = v_new
        if positions.size:
            self._lens[seq_id] = max(self._lens[seq_id], int(positions.max()) + 1)

    def fork(self, parent, child, prefix_len: int) -> None:
        assert child not in self._keys
        self._keys[child] = self._keys[parent][:prefix_len].copy()
        self._values[child] = self._values[parent][:prefix_len].copy()
        self._lens[child] = prefix_len

    def free(self, seq_id) -> None:
        del self._keys[seq_id], self._values[seq_id], self._lens[seq_id]

    def gather(self, seq_id, length: int):
        return (
            self._keys[seq_id][:length].copy(),
            self._values[seq_id][:length].copy(),
        )

    def logical_len(self, seq_id) -> int:
        return self._lens[seq_id]

    def sequences(self):
        return list(self._keys)


# -- attention instances ------------------------------------------------------


@dataclass
class AttentionInstance:
    """A built paged scenario plus the contiguous originals the oracle sees."""

    config: AttentionConfig
    pool: PagePool
    store: KvStore
    meta: MaskMeta
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    lengths: list
    q_lengths: list

    def paged_output(self, stats: KernelStats | None = None, **kw) -> np.ndarray:
        return paged_attention(self.queries, self.store, self.meta, self.config, stats=stats, **kw)

    def gathered_output(self, **kw) -> np.ndarray:
        keys, values = self.store.gather_view(self.meta.view)
        return gathered_attention(self.queries, keys, values, self.meta, self.config, **kw)

    def reference_output(self) -> np.ndarray:
        return reference_attention(
            self.queries,
            self.keys,
            self.values,
            self.lengths,
            causal=self.config.causal,
            scale=self.config.scale,
            q_lengths=self.q_lengths,
        )


def build_attention_instance(
    rng: np.random.Generator,
    lengths,
    *,
    head_count: int,
    head_dim: int,
    page_size: int,
    causal: bool,
    q_lengths=None,
    scatter: bool = True,
) -> AttentionInstance:
    """Fill a fresh pool with random K/V and stand up query metadata.

    With `scatter`, dummy reservations fragment the pool first so the real
    sequences land on non-adjacent pages and page order differs from logical
    order.
    """
    lengths = [int(n) for n in lengths]
    if q_lengths is None:
        q_lengths = list(lengths)
    q_lengths = [int(n) for n in q_lengths]
    total = sum(lengths)
    pages_needed = sum(-(-n // page_size) for n in lengths)
    dummy_pages = int(rng.integers(1, pages_needed + 2)) if scatter else 0
    pool = PagePool(pages_needed + dummy_pages + 2, page_size=page_size)
    store = KvStore(pool, head_count, head_dim)

    keys = rng.standard_normal((total, head_count, head_dim)).astype(np.float32)
    values = rng.standard_normal((total, head_count, head_dim)).astype(np.float32)

    dummies = []
    if scatter:
        # Interleave throwaway reservations with the real ones, then free them,
        # so real tables reference shuffled physical pages.
        remaining = dummy_pages
        for i in range(len(lengths)):
            if remaining > 0:
                take = int(rng.integers(1, remaining + 1))
                name = f"_pad{i}"
                pool.reserve(name, take * page_size)
                dummies.append(name)
                remaining -= take
    offset = 0
    for i, n in enumerate(lengths):
        seq = f"s{i}"
        pool.reserve(seq, n)
        positions = np.arange(n)
        order = rng.permutation(n)  # scattered write order must not matter
        store.assign(seq, positions[order], keys[offset : offset + n][order],
                     values[offset : offset + n][order])
        offset += n
    for name in dummies:
        pool.free(name)

    view = store.batch_view([f"s{i}" for i in range(len(lengths))], lengths)
    meta = MaskMeta.suffix(view, q_lengths)
    queries = rng.standard_normal((sum(q_lengths), head_count, head_dim)).astype(np.float32)
    config = AttentionConfig(
        head_count=head_count, head_dim=head_dim, causal=causal, page_size=page_size
    )
    return AttentionInstance(
        config=config,
        pool=pool,
        store=store,
        meta=meta,
        queries=queries,
        keys=keys,
        values=values,
        lengths=lengths,
        q_lengths=q_lengths,
    )


def sample_attention_instance(
    rng: np.random.Generator,
    *,
    max_len: int = 1024,
    max_seqs: int = 8,
    budget_flops: float = 1.5e8,
) -> AttentionInstance:
    """Random instance over the verification grid, capped to a flop budget.

    Long contexts switch to suffix queries (the decode shape) so heavy
    head/width combinations stay inside the budget.
    """
    head_count = int(rng.choice(HEAD_COUNT_GRID))
    head_dim = int(rng.choice(HEAD_DIM_GRID))
    page_size = int(rng.choice(PAGE_SIZE_GRID))
    causal = bool(rng.integers(2))
    n_seqs = int(rng.integers(1, max_seqs + 1))
    # Log-uniform lengths cover both tiny and kilotoken sequences.
    lengths = [
        max(1, int(np.exp(rng.uniform(0.0, np.log(max_len)))))
        for _ in range(n_seqs)
    ]
    pair_budget = max(1, int(budget_flops / (4 * head_count * head_dim)))
    if sum(n * n for n in lengths) <= pair_budget:
        q_lengths = list(lengths)
    else:
        per_seq = max(1, pair_budget // max(1, sum(lengths)))
        q_lengths = [min(n, per_seq) for n in lengths]
    return build_attention_instance(
        rng,
        lengths,
        head_count=head_count,
        head_dim=head_dim,
        page_size=page_size,
        causal=causal,
        q_lengths=q_lengths,
    )


# -- allocator stress script ------------------------------------------------------


@dataclass
class ScriptResult:
    ok: bool
    ops_run: int
    gathers_checked: int
    exhaustions_seen: int
    double_frees_rejected: int
    forks_done: int
    error: str | None = None


def _atomic_failure(before, after) -> bool:
    """A failed grant must leak nothing: live pages and total availability are
    unchanged (tentatively bumped pages may legally migrate to the free stack)."""
    return (
        after.conserved
        and after.live_pages == before.live_pages
        and after.free_pages + after.never_allocated
        == before.free_pages + before.never_allocated
    )


def run_allocator_script(
    seed: int,
    ops: int = 10_000,
    *,
    pool_pages: int = 256,
    page_size: int = 16,
    head_count: int = 2,
    head_dim: int = 4,
    census_every: int = 1,
) -> ScriptResult:
    """Random reserve/grow/assign/gather/free/fork script with oracles.

    After every operation the page census must conserve
    live + free + never-allocated == capacity; every gather must equal the
    contiguous mirror bit-for-bit; failed reservations must leave the pool
    untouched; double frees must be rejected.
    """
    rng = np.random.default_rng(seed)
    pool = PagePool(pool_pages, page_size=page_size)
    store = KvStore(pool, head_count, head_dim)
    mirror = MirrorStore(head_count, head_dim)
    live: list[str] = []
    next_id = 0
    gathers = 0
    exhaustions = 0
    double_frees = 0
    forks = 0

    def rows(n):
        return (
            rng.standard_normal((n, head_count, head_dim)).astype(np.float32),
            rng.standard_normal((n, head_count, head_dim)).astype(np.float32),
        )

    def fail(i, msg):
        return ScriptResult(
            ok=False,
            ops_run=i,
            gathers_checked=gathers,
            exhaustions_seen=exhaustions,
            double_frees_rejected=double_frees,
            forks_done=forks,
            error=msg,
        )

    for i in range(ops):
        op = rng.choice(["reserve", "grow", "assign", "gather", "free", "fork"])
        if op == "reserve" or not live:
            name = f"q{next_id}"
            next_id += 1
            length = int(rng.integers(0, 6 * page_size))
            before = pool.census()
            try:
                pool.reserve(name, length)
                mirror.reserve(name, pool.table(name).capacity(page_size))
                live.append(name)
            except CapacityExhausted:
                exhaustions += 1
                after = pool.census()
                if not _atomic_failure(before, after):
                    return fail(i, f"reserve exhaustion was not atomic: {before} -> {after}")
        elif op == "grow":
            name = live[int(rng.integers(len(live)))]
            new_len = pool.table(name).capacity(page_size) + int(rng.integers(0, 3 * page_size))
            before = pool.census()
            try:
                pool.grow(name, new_len)
                mirror.grow(name, pool.table(name).capacity(page_size))
            except CapacityExhausted:
                exhaustions += 1
                after = pool.census()
                if not _atomic_failure(before, after):
                    return fail(i, f"grow exhaustion was not atomic: {before} -> {after}")
        elif op == "assign":
            name = live[int(rng.integers(len(live)))]
            capacity = pool.table(name).capacity(page_size)
            if capacity == 0:
                continue
            count = int(rng.integers(1, min(capacity, 4 * page_size) + 1))
            positions = rng.choice(capacity, size=count, replace=False)
            k_new, v_new = rows(count)
            try:
                store.assign(name, positions, k_new, v_new)
            except CapacityExhausted:
                exhaustions += 1  # copy-on-write page unavailable; state still valid
                continue
            mirror.grow(name, capacity)
            mirror.assign(name, positions, k_new, v_new)
        elif op == "gather":
            name = live[int(rng.integers(len(live)))]
            length = int(rng.integers(0, pool.table(name).logical_len + 1))
            got_k, got_v = store.gather(name, length)
            want_k, want_v = mirror.gather(name, length)
            gathers += 1
            if not (np.array_equal(got_k, want_k) and np.array_equal(got_v, want_v)):
                return fail(i, f"gather({name}, {length}) diverged from mirror")
        elif op == "free":
            name = live.pop(int(rng.integers(len(live))))
            pool.free(name)
            mirror.free(name)
            try:
                pool.free(name)
                return fail(i, f"double free of {name} was not rejected")
            except UnknownSequence:
                double_frees += 1
        elif op == "fork":
            parent = live[int(rng.integers(len(live)))]
            prefix = int(rng.integers(0, pool.table(parent).logical_len + 1))
            child = f"q{next_id}"
            next_id += 1
            before = pool.census()
            try:
                pool.fork(parent, child, prefix)
            except CapacityExhausted:
                exhaustions += 1
                after = pool.census()
                if not _atomic_failure(before, after):
                    return fail(i, f"fork exhaustion was not atomic: {before} -> {after}")
                continue
            mirror.fork(parent, child, prefix)
            mirror.grow(child, pool.table(child).capacity(page_size))
            live.append(child)
            forks += 1
        if census_every and i % census_every == 0:
            census = pool.census()
            if not census.conserved:
                return fail(i, f"census no longer conserved: {census}")
            stack = pool.dump()["free_stack"]
            if len(stack) != len(set(stack)):
                return fail(i, "free stack holds a duplicate page id")
    return ScriptResult(
        ok=True,
        ops_run=ops,
        gathers_checked=gathers,
        exhaustions_seen=exhaustions,
        double_frees_rejected=double_frees,
        forks_done=forks,
    )


# -- fork isolation trials ------------------------------------------------------------


def run_fork_isolation(
    seed: int,
    rounds: int = 1000,
    *,
    page_size: int = 16,
    head_count: int = 2,
    head_dim: int = 4,
) -> ScriptResult:
    """Random post-fork write interleavings; parent and child must never see
    each other's writes (checked against the value-semantics mirror)."""
    rng = np.random.default_rng(seed)
    checked = 0
    for round_idx in range(rounds):
        pool = PagePool(64, page_size=page_size)
        store = KvStore(pool, head_count, head_dim)
        mirror = MirrorStore(head_count, head_dim)
        length = int(rng.integers(1, 6 * page_size))
        pool.reserve("parent", length)
        mirror.reserve("parent", pool.table("parent").capacity(page_size))
        k0 = rng.standard_normal((length, head_count, head_dim)).astype(np.float32)
        v0 = rng.standard_normal((length, head_count, head_dim)).astype(np.float32)
        store.assign("parent", np.arange(length), k0, v0)
        mirror.assign("parent", np.arange(length), k0, v0)
        prefix = int(rng.integers(0, length + 1))
        pool.fork("parent", "child", prefix)
        mirror.fork("parent", "child", prefix)
        for _ in range(int(rng.integers(2, 10))):
            writer = "parent" if rng.integers(2) else "child"
            current = pool.table(writer).logical_len
            target = int(rng.integers(1, current + page_size + 1))
            pool.grow(writer, target)
            mirror.grow(writer, pool.table(writer).capacity(page_size))
            count = int(rng.integers(1, min(target, 2 * page_size) + 1))
            positions = rng.choice(target, size=count, replace=False)
            k_new = rng.standard_normal((count, head_count, head_dim)).astype(np.float32)
            v_new = rng.standard_normal((count, head_count, head_dim)).astype(np.float32)
            store.assign(writer, positions, k_new, v_new)
            mirror.assign(writer, positions, k_new, v_new)
            for reader in ("parent", "child"):
                length_r = pool.table(reader).logical_len
                got = store.gather(reader, length_r)
                want = mirror.gather(reader, length_r)
                checked += 1
                if not (np.array_equal(got[0], want[0]) and np.array_equal(got[1], want[1])):
                    return ScriptResult(
                        ok=False,
                        ops_run=round_idx,
                        gathers_checked=checked,
                        exhaustions_seen=0,
                        double_frees_rejected=0,
                        forks_done=round_idx,
                        error=f"round {round_idx}: {reader} gather diverged after {writer} write",
                    )
        census = pool.census()
        if not census.conserved:
            return ScriptResult(
                ok=False, ops_run=round_idx, gathers_checked=checked,
                exhaustions_seen=0, double_frees_rejected=0, forks_done=round_idx,
                error=f"round {round_idx}: census not conserved: {census}",
            )
    return ScriptResult(
        ok=True, ops_run=rounds, gathers_checked=checked,
        exhaustions_seen=0, double_frees_rejected=0, forks_done=rounds,
    )


# -- verification runner ----------------------------------------------------------------


@dataclass
class VerifyCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class VerifyResult:
    checks: list = field(default_factory=list)
    seed: int = 0
    instances: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "instances": self.instances,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "passed": c.passed, "detail": c.detail}
                for c in self.checks
            ],
        }


def run_verification(
    instances: int = 50,
    seed: int = 0,
    *,
    script_ops: int = 2000,
    isolation_rounds: int = 100,
    inject_fault: str | None = None,
) -> VerifyResult:
    """Run the oracle-equivalence and invariant suites.

    `inject_fault="block-table"` deliberately corrupts one block table before
    checking; a healthy verifier must then report an equivalence failure.
    """
    if instances <= 0:
        raise ConfigError("instances must be positive; zero checks would vacuously pass")
    result = VerifyResult(seed=seed, instances=instances)

    max_err = 0.0
    dual_path_ok = True
    skip_ok = True
    weights_ok = True
    detail = ""
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        inst = sample_attention_instance(rng, max_len=512)
        if inject_fault == "block-table" and i == 0:
            _corrupt_block_table(inst)
        paged = inst.paged_output()
        err = relative_error(paged, inst.reference_output())
        if err > max_err:
            max_err = err
            detail = (
                f"instance {i}: rel err {err:.3g} "
                f"(heads={inst.config.head_count}, dim={inst.config.head_dim}, "
                f"pages={inst.config.page_size}, causal={inst.config.causal})"
            )
        if i % 4 == 0:
            dual_path_ok &= bool(np.array_equal(paged, inst.gathered_output()))
        if i % 8 == 0:
            skip_ok &= bool(np.array_equal(paged, inst.paged_output(skip_empty=False)))
        if i % 16 == 0:
            weights = attention_weights(inst.queries, inst.store, inst.meta, inst.config)
            weights_ok &= bool(np.allclose(weights.sum(axis=2), 1.0, atol=1e-6))
    result.checks.append(
        VerifyCheck(
            name="attention-oracle-equivalence",
            passed=max_err <= ORACLE_REL_TOL,
            detail=f"max rel err {max_err:.3g} over {instances} instances; worst: {detail}",
        )
    )
    result.checks.append(
        VerifyCheck(
            name="paged-vs-gathered-agreement",
            passed=dual_path_ok,
            detail="zero-copy paged path vs materialized gather path, exact equality",
        )
    )
    result.checks.append(
        VerifyCheck(
            name="block-skip-soundness",
            passed=skip_ok,
            detail="skipping empty tiles vs masking them pointwise, exact equality",
        )
    )
    result.checks.append(
        VerifyCheck(
            name="softmax-row-sums",
            passed=weights_ok,
            detail="instrumented weights sum to 1 over allowed keys (1e-6)",
        )
    )
    script = run_allocator_script(seed=seed + 1, ops=script_ops)
    result.checks.append(
        VerifyCheck(
            name="allocator-census-and-mirror",
            passed=script.ok,
            detail=script.error
            or (
                f"{script.ops_run} ops, {script.gathers_checked} gathers, "
                f"{script.exhaustions_seen} atomic exhaustions, "
                f"{script.double_frees_rejected} double frees rejected"
            ),
        )
    )
    isolation = run_fork_isolation(seed=seed + 2, rounds=isolation_rounds)
    result.checks.append(
        VerifyCheck(
            name="fork-write-isolation",
            passed=isolation.ok,
            detail=isolation.error or f"{isolation.ops_run} interleaved rounds clean",
        )
    )
    return result


def _corrupt_block_table(inst: AttentionInstance) -> None:
    """Fault hook: misdirect one block-table entry (swap two pages)."""
    for i in range(len(inst.lengths)):
        table = inst.pool.table(f"s{i}")
        if len(table.entries) >= 2:
            table.entries[0], table.entries[1] = table.entries[1], table.entries[0]
            return
    # All tables single-page: rewire two sequences' pages instead.
    if len(inst.lengths) >= 2:
        t0, t1 = inst.pool.table("s0"), inst.pool.table("s1")
        t0.entries[0], t1.entries[0] = t1.entries[0], t0.entries[0]
