"""Desk-scale decoder-only transformer driving the paged cache end-to-end.

Weights are generated from a seed (no checkpoints), so two runs with the same
config are identical. Two decode paths exist:

* cached   -- compute Q/K/V for one new token, append K/V to the paged cache,
              attend over the scattered pages (per-step attention cost grows
              linearly with context length);
* nocache  -- recompute the whole prefix every step through the dense
              reference kernel (per-step attention cost grows quadratically).

FLOP counters, not timers, are the scaling signal. Attention flops count
4 * heads * head_dim per score pair: the paged path counts exactly the
allowed pairs it reduces over, the dense path counts every pair of the full
score matrix it materializes (masked entries included, which is what a dense
kernel really computes).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, KernelStats, MaskMeta, paged_attention
from .pool import PagePool
from .store import KvStore


@dataclass
class DecoderConfig:
    layers: int = 2
    head_count: int = 4
    head_dim: int = 16
    vocab: int = 256
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("layers", "head_count", "head_dim", "vocab", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if (self.head_count * self.head_dim) % 2:
            raise ValueError("model width must be even for sinusoidal positions")

    @property
    def d_model(self) -> int:
        return self.head_count * self.head_dim


@dataclass
class FlopCounter:
    """Monotone per-run floating-op counters (matmul work only)."""

    attention_flops: int = 0
    projection_flops: int = 0

    def add_linear(self, rows: int, d_in: int, d_out: int) -> None:
        self.projection_flops += 2 * rows * d_in * d_out

    def add_attention_pairs(self, pairs: int, head_count: int, head_dim: int) -> None:
        self.attention_flops += 4 * head_count * head_dim * pairs

    @property
    def total_flops(self) -> int:
        return self.attention_flops + self.projection_flops

    def snapshot(self) -> tuple[int, int]:
        return (self.attention_flops, self.projection_flops)


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + 1e-5) * gain + bias


def _dense_causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Standard dense attention baseline: materialize the full causal score
    matrix, two-pass fp32 softmax. Independent of the streaming paged kernel."""
    n = q.shape[0]
    qh = np.ascontiguousarray(q.transpose(1, 0, 2))  # (h, n, d)
    kh = np.ascontiguousarray(k.transpose(1, 2, 0))  # (h, d, n)
    scale = np.float32(1.0 / np.sqrt(q.shape[2]))
    scores = (qh @ kh) * scale
    scores += np.triu(np.full((n, n), -np.inf, dtype=np.float32), 1)
    scores -= scores.max(axis=2, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=2, keepdims=True)
    vh = np.ascontiguousarray(v.transpose(1, 0, 2))  # (h, n, d)
    return (scores @ vh).transpose(1, 0, 2)


def _sinusoid(positions: np.ndarray, width: int) -> np.ndarray:
    pos = positions.astype(np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(width // 2, dtype=np.float64) * 2.0 / width)
    angles = pos * freqs[None, :]
    out = np.empty((positions.shape[0], width), dtype=np.float32)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


class ToyDecoder:
    """Pre-norm residual blocks with a 2-layer ReLU MLP, all fp32."""

    def __init__(self, config: DecoderConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        hidden = config.mlp_ratio * d

        def linear(d_in, d_out):
            return (rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(np.float32)

        def norm_params():
            gain = (1.0 + 0.05 * rng.standard_normal(d)).astype(np.float32)
            bias = (0.05 * rng.standard_normal(d)).astype(np.float32)
            return gain, bias

        self.tok_embed = rng.standard_normal((config.vocab, d)).astype(np.float32)
        self.blocks = []
        for _ in range(config.layers):
            ln1_g, ln1_b = norm_params()
            ln2_g, ln2_b = norm_params()
            self.blocks.append(
                {
                    "ln1": (ln1_g, ln1_b),
                    "wq": linear(d, d),
                    "wk": linear(d, d),
                    "wv": linear(d, d),
                    "wo": linear(d, d),
                    "ln2": (ln2_g, ln2_b),
                    "w1": linear(d, hidden),
                    "w2": linear(hidden, d),
                }
            )
        self.ln_f = norm_params()
        self.unembed = linear(d, config.vocab)

    def embed(self, tokens, positions) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        return self.tok_embed[tokens] + _sinusoid(positions, self.config.d_model)

    def _qkv(self, block, x_norm, counter: FlopCounter | None):
        cfg = self.config
        n = x_norm.shape[0]
        q = (x_norm @ block["wq"]).reshape(n, cfg.head_count, cfg.head_dim)
        k = (x_norm @ block["wk"]).reshape(n, cfg.head_count, cfg.head_dim)
        v = (x_norm @ block["wv"]).reshape(n, cfg.head_count, cfg.head_dim)
        if counter:
            counter.add_linear(3 * n, cfg.d_model, cfg.d_model)
        return q, k, v

    def _finish_block(self, block, x, attn_rows, counter: FlopCounter | None):
        cfg = self.config
        n = x.shape[0]
        x = x + attn_rows.reshape(n, cfg.d_model).astype(np.float32) @ block["wo"]
        hidden = np.maximum(_layer_norm(x, *block["ln2"]) @ block["w1"], 0.0)
        x = x + hidden @ block["w2"]
        if counter:
            counter.add_linear(n, cfg.d_model, cfg.d_model)
            counter.add_linear(n, cfg.d_model, cfg.mlp_ratio * cfg.d_model)
            counter.add_linear(n, cfg.mlp_ratio * cfg.d_model, cfg.d_model)
        return x

    def _logits(self, x_last, counter: FlopCounter | None) -> np.ndarray:
        cfg = self.config
        logits = _layer_norm(x_last, *self.ln_f) @ self.unembed
        if counter:
            counter.add_linear(1, cfg.d_model, cfg.vocab)
        return logits[0]

    def forward_nocache(self, tokens, counter: FlopCounter | None = None) -> np.ndarray:
        """Full-prefix recompute; returns fp32 logits for the last position.

        The dense baseline: every step rebuilds the complete score matrix, so
        counted attention work is heads * N^2 pairs per layer.
        """
        cfg = self.config
        n = len(tokens)
        if n == 0:
            raise ValueError("prefix must contain at least one token")
        x = self.embed(tokens, np.arange(n))
        for block in self.blocks:
            q, k, v = self._qkv(block, _layer_norm(x, *block["ln1"]), counter)
            attn = _dense_causal_attention(q, k, v)
            if counter:
                counter.add_attention_pairs(n * n, cfg.head_count, cfg.head_dim)
            x = self._finish_block(block, x, attn, counter)
        return self._logits(x[-1:], counter)


class PagedDecoderCache:
    """Per-layer KV stores over one shared page pool."""

    def __init__(self, decoder: ToyDecoder, pool: PagePool):
        cfg = decoder.config
        self.pool = pool
        self.stores = [
            KvStore(pool, cfg.head_count, cfg.head_dim) for _ in range(cfg.layers)
        ]
        self.attn_config = AttentionConfig(
            head_count=cfg.head_count,
            head_dim=cfg.head_dim,
            causal=True,
            page_size=pool.page_size,
        )


@dataclass
class StepRecord:
    kind: str  # "prefill" or "step"
    context_len: int  # keys attended in this step
    attention_flops: int
    projection_flops: int
    wall_ns: int


class DecodeSession:
    """Cached decode of one sequence against a shared paged cache."""

    def __init__(self, decoder: ToyDecoder, cache: PagedDecoderCache, seq_id):
        self.decoder = decoder
        self.cache = cache
        self.seq_id = seq_id
        self._len = 0
        cache.pool.reserve(seq_id, 0)

    @property
    def context_len(self) -> int:
        return self._len

    def prefill(self, tokens, counter: FlopCounter | None = None) -> np.ndarray:
        """Run the whole prompt through the cached path in one batched pass."""
        if self._len:
            raise ValueError("prefill must happen before any decode step")
        n = len(tokens)
        if n == 0:
            raise ValueError("prompt must contain at least one token")
        dec, cache = self.decoder, self.cache
        cache.pool.grow(self.seq_id, n)
        positions = np.arange(n)
        x = dec.embed(tokens, positions)
        for store, block in zip(cache.stores, dec.blocks):
            q, k, v = dec._qkv(block, _layer_norm(x, *block["ln1"]), counter)
            store.assign(self.seq_id, positions, k, v)
            view = store.batch_view([self.seq_id])
            stats = KernelStats()
            attn = paged_attention(
                q, store, MaskMeta.self_attention(view), cache.attn_config, stats=stats
            )
            if counter:
                counter.add_attention_pairs(
                    stats.allowed_pairs, dec.config.head_count, dec.config.head_dim
                )
            x = dec._finish_block(block, x, attn, counter)
        self._len = n
        return dec._logits(x[-1:], counter)

    def step(self, token: int, counter: FlopCounter | None = None) -> np.ndarray:
        """One cached decode step: project one token, append K/V, attend over
        the full context through the paged kernel."""
        dec, cache = self.decoder, self.cache
        pos = self._len
        cache.pool.grow(self.seq_id, pos + 1)
        x = dec.embed([token], [pos])
        for store, block in zip(cache.stores, dec.blocks):
            q, k, v = dec._qkv(block, _layer_norm(x, *block["ln1"]), counter)
            store.assign(self.seq_id, [pos], k, v)
            view = store.batch_view([self.seq_id])
            stats = KernelStats()
            attn = paged_attention(
                q, store, MaskMeta.decode(view), cache.attn_config, stats=stats
            )
            if counter:
                counter.add_attention_pairs(
                    stats.allowed_pairs, dec.config.head_count, dec.config.head_dim
                )
            x = dec._finish_block(block, x, attn, counter)
        self._len = pos + 1
        return dec._logits(x[-1:], counter)

    def free(self) -> int:
        return self.cache.pool.free(self.seq_id)


@dataclass
class GenerationResult:
    tokens: list
    records: list = field(repr=False)
    counter: FlopCounter = field(default_factory=FlopCounter)

    @property
    def attention_flops(self) -> int:
        return self.counter.attention_flops


def generate(
    decoder: ToyDecoder,
    prompt,
    steps: int,
    mode: str = "cached",
    *,
    page_size: int = 64,
    pool_pages: int | None = None,
) -> GenerationResult:
    """Greedy argmax decoding; deterministic given the decoder seed.

    Returns the produced tokens (prompt included) and the per-step FLOP and
    wall-time series.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    if any(t < 0 or t >= decoder.config.vocab for t in prompt):
        raise ValueError("prompt token outside vocabulary")
    if mode not in ("cached", "nocache"):
        raise ValueError(f"mode must be 'cached' or 'nocache', got {mode!r}")

    counter = FlopCounter()
    records: list[StepRecord] = []
    tokens = list(prompt)

    if mode == "cached":
        total = len(prompt) + steps
        if pool_pages is None:
            pool_pages = -(-total // page_size) + 1
        pool = PagePool(pool_pages, page_size)
        cache = PagedDecoderCache(decoder, pool)
        session = DecodeSession(decoder, cache, seq_id="gen")
        before = counter.snapshot()
        t0 = time.perf_counter_ns()
        logits = session.prefill(prompt, counter)
        records.append(_record("prefill", len(prompt), before, counter, t0))
        for _ in range(steps):
            token = int(np.argmax(logits))
            tokens.append(token)
            before = counter.snapshot()
            t0 = time.perf_counter_ns()
            logits = session.step(token, counter)
            records.append(_record("step", session.context_len, before, counter, t0))
    else:
        for _ in range(steps):
            before = counter.snapshot()
            t0 = time.perf_counter_ns()
            logits = decoder.forward_nocache(tokens, counter)
            records.append(_record("step", len(tokens), before, counter, t0))
            tokens.append(int(np.argmax(logits)))

    return GenerationResult(tokens=tokens, records=records, counter=counter)


def _record(kind, context, before, counter: FlopCounter, t0) -> StepRecord:
    return StepRecord(
        kind=kind,
        context_len=context,
        attention_flops=counter.attention_flops - before[0],
        projection_flops=counter.projection_flops - before[1],
        wall_ns=time.perf_counter_ns() - t0,
    )
