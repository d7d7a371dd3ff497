"""Benchmark runners and machine-readable reports.

FLOP counters are the acceptance currency; wall-clock columns are recorded but
carry an `advisory_` prefix and are excluded from determinism comparisons
(CPU timing noise). Every report embeds its config, seed, and code version so
two runs with the same triple produce identical non-timing fields.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .decoder import DecodeSession, DecoderConfig, FlopCounter, PagedDecoderCache, ToyDecoder
from .errors import ConfigError
from .pool import PagePool
from .workload import (
    KvBytesConfig,
    full_report,
    gen_chat_growth,
    gen_mixed_batch,
    gen_single_sequence,
)

ALLOWED_PAGE_SIZES = (16, 32, 64, 128)
SCENARIOS = ("single", "mixed", "mixed-uniform", "chat")
DEFAULT_CONTEXT_LENGTHS = (128, 256, 512, 1024, 2048)


@dataclass
class RunConfig:
    scenario: str = "mixed"
    page_size: int = 64
    pool_pages: int | None = None
    seq_lens: tuple = DEFAULT_CONTEXT_LENGTHS
    seed: int = 0
    mode: str = "both"  # cached | nocache | both
    out_format: str = "json"
    out_path: str | None = None
    layers: int = 2
    head_count: int = 4
    head_dim: int = 16
    vocab: int = 256
    bytes_per_scalar: int = 2
    contiguous_max_len: int | None = None
    single_len: int = 4096
    chat_start: int = 1024
    chat_end: int = 4096

    def validate(self) -> None:
        if self.page_size not in ALLOWED_PAGE_SIZES:
            raise ConfigError(f"page_size must be one of {ALLOWED_PAGE_SIZES}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.mode not in ("cached", "nocache", "both"):
            raise ConfigError("mode must be cached, nocache, or both")
        if self.out_format not in ("json", "csv"):
            raise ConfigError("format must be json or csv")
        lens = tuple(int(n) for n in self.seq_lens)
        if not lens or any(n <= 0 for n in lens) or list(lens) != sorted(lens):
            raise ConfigError("seq-lens must be a non-empty ascending list of positive ints")
        if self.pool_pages is not None and self.pool_pages <= 0:
            raise ConfigError("pool-pages must be positive")
        for name in ("layers", "head_count", "head_dim", "vocab", "bytes_per_scalar"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        self.seq_lens = lens

    def model_dict(self) -> dict:
        return {
            "layers": self.layers,
            "head_count": self.head_count,
            "head_dim": self.head_dim,
            "vocab": self.vocab,
        }


@dataclass
class ScalingRow:
    context_len: int
    cached_attention_flops: int | None = None
    cached_projection_flops: int | None = None
    nocache_attention_flops: int | None = None
    nocache_projection_flops: int | None = None
    advisory_cached_wall_ns: int | None = None
    advisory_nocache_wall_ns: int | None = None


@dataclass
class ScalingReport:
    config: dict
    code_version: str
    rows: list = field(default_factory=list)
    cached_flop_ratios: list = field(default_factory=list)
    nocache_flop_ratios: list = field(default_factory=list)
    created_at: str = ""

    def to_dict(self) -> dict:
        return {
            "report": "scaling",
            "code_version": self.code_version,
            "created_at": self.created_at,
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "flop_ratios": {
                "cached": self.cached_flop_ratios,
                "nocache": self.nocache_flop_ratios,
            },
        }

    def deterministic_dict(self) -> dict:
        """The report minus timestamps and advisory wall-clock columns."""
        out = self.to_dict()
        out.pop("created_at", None)
        for row in out["rows"]:
            for key in list(row):
                if key.startswith("advisory_"):
                    row.pop(key)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = [f.name for f in ScalingRow.__dataclass_fields__.values()]
        writer = csv.DictWriter(buf, fieldnames=fields)
        writer.writeheader()
        for row in self.rows:
            writer.writerow(asdict(row))
        return buf.getvalue()


def _measure_cached_step(decoder: ToyDecoder, tokens, config: RunConfig):
    """Per-step cost of the decode that brings the context to len(tokens)."""
    n = len(tokens)
    pages = config.pool_pages or (-(-n // config.page_size) + 1)
    pool = PagePool(pages, config.page_size)
    cache = PagedDecoderCache(decoder, pool)
    session = DecodeSession(decoder, cache, seq_id="bench")
    counter = FlopCounter()
    if n == 1:
        t0 = time.perf_counter_ns()
        session.prefill(tokens, counter)
        wall = time.perf_counter_ns() - t0
        return counter, wall
    session.prefill(tokens[:-1])
    t0 = time.perf_counter_ns()
    session.step(int(tokens[-1]), counter)
    wall = time.perf_counter_ns() - t0
    return counter, wall


def run_bench(config: RunConfig) -> ScalingReport:
    """Per-step FLOPs and wall time for cached vs uncached decode across
    context lengths, plus growth ratios between adjacent lengths."""
    config.validate()
    decoder = ToyDecoder(
        DecoderConfig(
            layers=config.layers,
            head_count=config.head_count,
            head_dim=config.head_dim,
            vocab=config.vocab,
            seed=config.seed,
        )
    )
    rng = np.random.default_rng(config.seed)
    report = ScalingReport(
        config={
            "seed": config.seed,
            "page_size": config.page_size,
            "mode": config.mode,
            "seq_lens": list(config.seq_lens),
            "model": config.model_dict(),
        },
        code_version=__version__,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
    for n in config.seq_lens:
        tokens = rng.integers(0, config.vocab, size=n).tolist()
        row = ScalingRow(context_len=n)
        if config.mode in ("cached", "both"):
            counter, wall = _measure_cached_step(decoder, tokens, config)
            row.cached_attention_flops = counter.attention_flops
            row.cached_projection_flops = counter.projection_flops
            row.advisory_cached_wall_ns = wall
        if config.mode in ("nocache", "both"):
            counter = FlopCounter()
            t0 = time.perf_counter_ns()
            decoder.forward_nocache(tokens, counter)
            row.advisory_nocache_wall_ns = time.perf_counter_ns() - t0
            row.nocache_attention_flops = counter.attention_flops
            row.nocache_projection_flops = counter.projection_flops
        report.rows.append(row)
    for prev, cur in zip(report.rows, report.rows[1:]):
        if prev.cached_attention_flops and cur.cached_attention_flops:
            report.cached_flop_ratios.append(
                cur.cached_attention_flops / prev.cached_attention_flops
            )
        if prev.nocache_attention_flops and cur.nocache_attention_flops:
            report.nocache_flop_ratios.append(
                cur.nocache_attention_flops / prev.nocache_attention_flops
            )
    return report


def build_trace(config: RunConfig):
    if config.scenario == "single":
        return gen_single_sequence(config.single_len)
    if config.scenario == "mixed":
        return gen_mixed_batch(seed=config.seed, mode="ladder")
    if config.scenario == "mixed-uniform":
        return gen_mixed_batch(seed=config.seed, mode="uniform")
    if config.scenario == "chat":
        return gen_chat_growth(config.chat_start, config.chat_end)
    raise ConfigError(f"unknown scenario {config.scenario!r}")


def run_audit(config: RunConfig, include_series: bool = True) -> dict:
    """Allocator accounting for one scenario: paged vs contiguous peaks,
    overhead against the theoretical minimum, and per-layer KV bytes."""
    config.validate()
    trace = build_trace(config)
    bytes_config = KvBytesConfig(
        layers=config.layers,
        head_count=config.head_count,
        head_dim=config.head_dim,
        bytes_per_scalar=config.bytes_per_scalar,
    )
    report = full_report(trace, config.page_size, config.contiguous_max_len, bytes_config)
    out = report.to_dict(include_series=include_series)
    out["report"] = "memory_audit"
    out["code_version"] = __version__
    out["config"] = {
        "scenario": config.scenario,
        "seed": config.seed,
        "page_size": config.page_size,
        "model": config.model_dict(),
        "bytes_per_scalar": config.bytes_per_scalar,
    }
    return out


def audit_to_csv(audit: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "paged", "contiguous"])
    for key in ("peak_charged_slots", "peak_bytes", "overhead_pct", "waste_pct"):
        writer.writerow([key, audit["paged"][key], audit["contiguous"][key]])
    writer.writerow(["theoretical_min_bytes", audit["theoretical_min_bytes"], ""])
    writer.writerow(["kv_bytes_per_layer", audit["kv_bytes_per_layer"], ""])
    if "series" in audit["paged"]:
        writer.writerow([])
        writer.writerow(["event_index", "live_seqs", "live_tokens", "paged_slots", "contiguous_slots"])
        for p_point, c_point in zip(audit["paged"]["series"], audit["contiguous"]["series"]):
            writer.writerow(
                [
                    p_point["event_index"],
                    p_point["live_seqs"],
                    p_point["live_tokens"],
                    p_point["charged_slots"],
                    c_point["charged_slots"],
                ]
            )
    return buf.getvalue()


def write_report(payload, config: RunConfig, csv_renderer=None) -> str:
    """Serialize a report dict per the configured format; write to out_path or
    return the text."""
    if config.out_format == "csv":
        if csv_renderer is None:
            raise ConfigError("this report has no CSV form")
        text = csv_renderer(payload)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if config.out_path:
        with open(config.out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
