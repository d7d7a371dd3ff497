"""Deterministic evaluation traces and allocator accounting.

A trace is an ordered list of coarse sequence-lifecycle events (arrive,
decode, finish, fork). `account` replays a trace against an allocator model
and reports peak charged memory next to the theoretical minimum (exactly the
live valid tokens, shared prefixes counted once).

Three generators cover the benchmark scenarios: one long sequence, a batch of
16 mixed-length prompts (fixed ladder 500..8000 or uniform draws from
256..4096), and a chat whose context grows in multiplicative phases.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidTrace, PagedKvError
from .pool import PagePool

LADDER_LENGTHS = tuple(range(500, 8001, 500))
UNIFORM_LENGTH_CHOICES = tuple(range(256, 4097, 256))


@dataclass(frozen=True)
class Arrive:
    seq: str
    prompt_len: int


@dataclass(frozen=True)
class Decode:
    seq: str
    n_tokens: int


@dataclass(frozen=True)
class Finish:
    seq: str


@dataclass(frozen=True)
class ForkEvent:
    parent: str
    child: str
    prefix_len: int


_EVENT_TYPES = {"arrive": Arrive, "decode": Decode, "finish": Finish, "fork": ForkEvent}


@dataclass
class Trace:
    name: str
    seed: int | None
    events: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"trace": self.name, "seed": self.seed}, sort_keys=True)]
        for event in self.events:
            record = {"event": _event_name(event)}
            record.update(asdict(event))
            lines.append(json.dumps(record, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        lines = [line for line in text.splitlines() if line.strip()]
        if not lines:
            raise InvalidTrace("empty trace document")
        header = json.loads(lines[0])
        trace = cls(name=header.get("trace", "unnamed"), seed=header.get("seed"))
        for line in lines[1:]:
            record = json.loads(line)
            kind = record.pop("event", None)
            if kind not in _EVENT_TYPES:
                raise InvalidTrace(f"unknown event kind {kind!r}")
            trace.events.append(_EVENT_TYPES[kind](**record))
        return trace

    def stable_hash(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    def total_tokens(self) -> int:
        total = 0
        for event in self.events:
            if isinstance(event, Arrive):
                total += event.prompt_len
            elif isinstance(event, Decode):
                total += event.n_tokens
            elif isinstance(event, ForkEvent):
                total += event.prefix_len
        return total


def _event_name(event) -> str:
    for name, cls in _EVENT_TYPES.items():
        if isinstance(event, cls):
            return name
    raise InvalidTrace(f"unsupported event object {event!r}")


# -- generators ---------------------------------------------------------------


def gen_single_sequence(length: int, seq_id: str = "seq0") -> Trace:
    """One arrival plus one decode burst to the target length."""
    if length < 0:
        raise ValueError("length must be non-negative")
    trace = Trace(name="single_sequence", seed=None)
    trace.events.append(Arrive(seq=seq_id, prompt_len=0))
    if length:
        trace.events.append(Decode(seq=seq_id, n_tokens=length))
    return trace


def gen_mixed_batch(seed: int = 0, mode: str = "ladder", count: int = 16) -> Trace:
    """Concurrent mixed-length prompts.

    `ladder` uses the fixed lengths 500, 1000, ..., 8000 (always 16 prompts),
    arrivals first so the peak holds every prompt live, finishes in seeded
    order afterwards. `uniform` draws `count` lengths uniformly from
    {256, 512, ..., 4096} and interleaves finishes between arrivals.
    """
    rng = np.random.default_rng(seed)
    if mode == "ladder":
        lengths = list(LADDER_LENGTHS)
    elif mode == "uniform":
        lengths = [int(rng.choice(UNIFORM_LENGTH_CHOICES)) for _ in range(count)]
    else:
        raise ValueError(f"mode must be 'ladder' or 'uniform', got {mode!r}")
    trace = Trace(name=f"mixed_batch_{mode}", seed=seed)
    names = [f"req{i:02d}" for i in range(len(lengths))]
    if mode == "ladder":
        for name, length in zip(names, lengths):
            trace.events.append(Arrive(seq=name, prompt_len=length))
        for idx in rng.permutation(len(names)):
            trace.events.append(Finish(seq=names[idx]))
    else:
        live: list[str] = []
        for name, length in zip(names, lengths):
            trace.events.append(Arrive(seq=name, prompt_len=length))
            live.append(name)
            while len(live) > 1 and rng.random() < 0.3:
                victim = live.pop(int(rng.integers(len(live))))
                trace.events.append(Finish(seq=victim))
        for idx in rng.permutation(len(live)):
            trace.events.append(Finish(seq=live[idx]))
    return trace


def gen_chat_growth(start: int, end: int, step_factor: float = 2.0, seq_id: str = "chat") -> Trace:
    """Single context extended in multiplicative phases from start to end."""
    if start <= 0 or end < start:
        raise ValueError("need 0 < start <= end")
    if step_factor <= 1.0:
        raise ValueError("step_factor must exceed 1")
    trace = Trace(name="chat_growth", seed=None)
    trace.events.append(Arrive(seq=seq_id, prompt_len=start))
    current = start
    while current < end:
        nxt = min(int(current * step_factor), end)
        if nxt <= current:
            nxt = current + 1
        trace.events.append(Decode(seq=seq_id, n_tokens=nxt - current))
        current = nxt
    return trace


# -- accounting ------------------------------------------------------------------


@dataclass(frozen=True)
class PagedModel:
    page_size: int

    def label(self) -> str:
        return f"paged({self.page_size})"


@dataclass(frozen=True)
class ContiguousModel:
    max_len: int

    def label(self) -> str:
        return f"contiguous({self.max_len})"


@dataclass(frozen=True)
class KvBytesConfig:
    """Byte conversion for token slots: layers x 2 (K,V) x heads x head_dim x scalar."""

    layers: int = 2
    head_count: int = 4
    head_dim: int = 16
    bytes_per_scalar: int = 2  # report in half precision by default

    @property
    def bytes_per_token(self) -> int:
        return self.layers * 2 * self.head_count * self.head_dim * self.bytes_per_scalar


@dataclass
class CensusPoint:
    event_index: int
    live_seqs: int
    live_tokens: int  # distinct valid tokens (shared prefixes counted once)
    charged_slots: int  # token slots the allocator holds


@dataclass
class AllocatorAccount:
    model: str
    peak_charged_slots: int
    peak_live_tokens: int
    peak_bytes: int
    theoretical_min_bytes: int
    overhead_pct: float  # fraction: peak / theoretical_min - 1
    waste_pct: float  # fraction of charged memory idle at peak
    series: list = field(repr=False, default_factory=list)

    def to_dict(self, include_series: bool = True) -> dict:
        out = {
            "model": self.model,
            "peak_charged_slots": self.peak_charged_slots,
            "peak_live_tokens": self.peak_live_tokens,
            "peak_bytes": self.peak_bytes,
            "theoretical_min_bytes": self.theoretical_min_bytes,
            "overhead_pct": self.overhead_pct,
            "waste_pct": self.waste_pct,
        }
        if include_series:
            out["series"] = [asdict(p) for p in self.series]
        return out


class _TraceReplay:
    """Drives real page pools through a trace; yields per-event censuses.

    The theoretical minimum is measured with a one-slot-per-page pool: page
    granularity of one token makes live pages equal distinct valid tokens,
    which stays exact under prefix sharing.
    """

    def __init__(self, trace: Trace, page_size: int | None):
        cap_tokens = trace.total_tokens()
        n_events = max(len(trace.events), 1)
        self.trace = trace
        self.min_pool = PagePool(max(cap_tokens + n_events + 2, 4), page_size=1)
        self.paged_pool = None
        if page_size is not None:
            pages = -(-cap_tokens // page_size) + n_events + 2
            self.paged_pool = PagePool(max(pages, 4), page_size=page_size)
        self.lengths: dict[str, int] = {}

    def _apply(self, pool: PagePool, event) -> None:
        if isinstance(event, Arrive):
            pool.reserve(event.seq, event.prompt_len)
            pool.table(event.seq).logical_len = event.prompt_len
        elif isinstance(event, Decode):
            new_len = pool.table(event.seq).logical_len + event.n_tokens
            pool.grow(event.seq, new_len)
            pool.table(event.seq).logical_len = new_len
        elif isinstance(event, Finish):
            pool.free(event.seq)
        elif isinstance(event, ForkEvent):
            pool.fork(event.parent, event.child, event.prefix_len)
        else:
            raise InvalidTrace(f"unsupported event {event!r}")

    def walk(self):
        for index, event in enumerate(self.trace.events):
            try:
                if isinstance(event, (Arrive, Decode)) and _count_of(event) < 0:
                    raise InvalidTrace(f"negative token count in {event!r}")
                self._apply(self.min_pool, event)
                if self.paged_pool is not None:
                    self._apply(self.paged_pool, event)
            except InvalidTrace:
                raise
            except (PagedKvError, ValueError) as exc:
                raise InvalidTrace(f"event {index} ({event!r}): {exc}") from exc
            if isinstance(event, Arrive):
                self.lengths[event.seq] = event.prompt_len
            elif isinstance(event, Decode):
                self.lengths[event.seq] += event.n_tokens
            elif isinstance(event, Finish):
                del self.lengths[event.seq]
            elif isinstance(event, ForkEvent):
                self.lengths[event.child] = event.prefix_len
            yield index, event


def _count_of(event) -> int:
    return event.prompt_len if isinstance(event, Arrive) else event.n_tokens


def account(trace: Trace, model, bytes_config: KvBytesConfig) -> AllocatorAccount:
    """Replay a trace under one allocator model; pure function of the trace.

    The paged model charges exactly the pages a real pool holds (census walk);
    the contiguous model charges `max_len` slots per live sequence.
    """
    paged_size = model.page_size if isinstance(model, PagedModel) else None
    if isinstance(model, ContiguousModel) and model.max_len <= 0:
        raise ValueError("contiguous max_len must be positive")
    replay = _TraceReplay(trace, paged_size)
    series: list[CensusPoint] = []
    peak_charged = 0
    peak_tokens = 0
    for index, _event in replay.walk():
        live_tokens = replay.min_pool.census().live_pages
        if isinstance(model, ContiguousModel):
            over = [s for s, n in replay.lengths.items() if n > model.max_len]
            if over:
                raise InvalidTrace(
                    f"sequences {over} exceed contiguous max_len {model.max_len}"
                )
            charged = len(replay.lengths) * model.max_len
        else:
            charged = replay.paged_pool.census().live_pages * model.page_size
        series.append(
            CensusPoint(
                event_index=index,
                live_seqs=len(replay.lengths),
                live_tokens=live_tokens,
                charged_slots=charged,
            )
        )
        peak_charged = max(peak_charged, charged)
        peak_tokens = max(peak_tokens, live_tokens)
    bpt = bytes_config.bytes_per_token
    peak_bytes = peak_charged * bpt
    min_bytes = peak_tokens * bpt
    overhead = (peak_bytes / min_bytes - 1.0) if min_bytes else 0.0
    waste = (1.0 - min_bytes / peak_bytes) if peak_bytes else 0.0
    return AllocatorAccount(
        model=model.label(),
        peak_charged_slots=peak_charged,
        peak_live_tokens=peak_tokens,
        peak_bytes=peak_bytes,
        theoretical_min_bytes=min_bytes,
        overhead_pct=overhead,
        waste_pct=waste,
        series=series,
    )


@dataclass
class MemoryReport:
    """Paged vs contiguous accounting for one trace, plus per-layer KV figures."""

    trace_name: str
    trace_hash: str
    seed: int | None
    bytes_config: KvBytesConfig
    paged: AllocatorAccount
    contiguous: AllocatorAccount
    theoretical_min_bytes: int
    kv_bytes_per_layer: int

    def to_dict(self, include_series: bool = True) -> dict:
        return {
            "trace": self.trace_name,
            "trace_hash": self.trace_hash,
            "seed": self.seed,
            "bytes_config": asdict(self.bytes_config),
            "bytes_per_token": self.bytes_config.bytes_per_token,
            "theoretical_min_bytes": self.theoretical_min_bytes,
            "kv_bytes_per_layer": self.kv_bytes_per_layer,
            "paged": self.paged.to_dict(include_series),
            "contiguous": self.contiguous.to_dict(include_series),
        }


def full_report(
    trace: Trace,
    page_size: int,
    contiguous_max_len: int | None,
    bytes_config: KvBytesConfig,
) -> MemoryReport:
    """Account the trace under both allocator models.

    `contiguous_max_len` defaults to the longest sequence the trace reaches.
    `kv_bytes_per_layer` is the theoretical minimum at peak divided across
    layers: tokens x 2 (K,V) x heads x head_dim x bytes-per-scalar.
    """
    if contiguous_max_len is None:
        contiguous_max_len = _max_sequence_length(trace)
    paged = account(trace, PagedModel(page_size), bytes_config)
    contiguous = account(trace, ContiguousModel(contiguous_max_len), bytes_config)
    return MemoryReport(
        trace_name=trace.name,
        trace_hash=trace.stable_hash(),
        seed=trace.seed,
        bytes_config=bytes_config,
        paged=paged,
        contiguous=contiguous,
        theoretical_min_bytes=paged.theoretical_min_bytes,
        kv_bytes_per_layer=paged.theoretical_min_bytes // bytes_config.layers,
    )


def _max_sequence_length(trace: Trace) -> int:
    lengths: dict[str, int] = {}
    peak = 1
    for event in trace.events:
        if isinstance(event, Arrive):
            lengths[event.seq] = event.prompt_len
        elif isinstance(event, Decode):
            lengths[event.seq] = lengths.get(event.seq, 0) + event.n_tokens
        elif isinstance(event, ForkEvent):
            lengths[event.child] = event.prefix_len
        elif isinstance(event, Finish):
            lengths.pop(event.seq, None)
        if lengths:
            peak = max(peak, max(lengths.values()))
    return peak
