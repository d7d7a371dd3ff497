"""Paged KV-cache engine: page-granular allocation, block tables, exact
attention over scattered pages, and a desk-scale benchmark harness."""

__version__ = "0.1.0"

from .errors import (
    CapacityExhausted,
    ConfigError,
    DuplicateSequence,
    InvalidPrefix,
    InvalidTrace,
    NoAllowedKeys,
    OutOfRange,
    PagedKvError,
    ShapeMismatch,
    UnknownSequence,
)
from .pool import BlockTable, PageAddress, PagePool, PoolCensus
from .store import BatchView, KvStore
from .attention import (
    AttentionConfig,
    BlockKind,
    BlockMask,
    KernelStats,
    MaskMeta,
    attention_weights,
    build_block_mask,
    gathered_attention,
    mask_allow,
    paged_attention,
    reference_attention,
)
from .decoder import (
    DecodeSession,
    DecoderConfig,
    FlopCounter,
    GenerationResult,
    PagedDecoderCache,
    ToyDecoder,
    generate,
)
from .workload import (
    Arrive,
    ContiguousModel,
    Decode,
    Finish,
    ForkEvent,
    KvBytesConfig,
    MemoryReport,
    PagedModel,
    Trace,
    account,
    full_report,
    gen_chat_growth,
    gen_mixed_batch,
    gen_single_sequence,
)

__all__ = [name for name in dir() if not name.startswith("_")]
