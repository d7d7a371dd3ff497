"""Command-line entry point: bench, audit, verify, trace-dump.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import (
    ALLOWED_PAGE_SIZES,
    DEFAULT_CONTEXT_LENGTHS,
    SCENARIOS,
    RunConfig,
    audit_to_csv,
    build_trace,
    run_audit,
    run_bench,
    write_report,
)
from .errors import ConfigError, PagedKvError
from .verify import run_verification


def _parse_lens(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad --seq-lens value {text!r}") from exc


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--page-size", type=int, default=64, choices=ALLOWED_PAGE_SIZES)
    parser.add_argument("--pool-pages", type=int, default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--format", dest="out_format", choices=("json", "csv"), default="json")
    parser.add_argument("--out", dest="out_path", default=None)


def _add_model(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--head-dim", type=int, default=16)
    parser.add_argument("--vocab", type=int, default=256)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pagedkv",
        description="Paged KV-cache benchmarks: scaling, memory audit, self-verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="per-step FLOP/latency scaling, cached vs uncached")
    _add_common(bench)
    _add_model(bench)
    bench.add_argument(
        "--seq-lens",
        type=_parse_lens,
        default=DEFAULT_CONTEXT_LENGTHS,
        help="comma-separated context lengths (default 128,256,512,1024,2048)",
    )
    bench.add_argument("--mode", choices=("cached", "nocache", "both"), default="both")
    bench.set_defaults(func=_cmd_bench)

    audit = sub.add_parser("audit", help="allocator memory accounting for one scenario")
    _add_common(audit)
    _add_model(audit)
    audit.add_argument("--scenario", choices=SCENARIOS, default="mixed")
    audit.add_argument("--bytes-per-scalar", type=int, default=2)
    audit.add_argument("--max-len", type=int, default=None, help="contiguous buffer size")
    audit.add_argument("--single-len", type=int, default=4096)
    audit.add_argument("--chat-start", type=int, default=1024)
    audit.add_argument("--chat-end", type=int, default=4096)
    audit.add_argument("--no-series", action="store_true", help="omit per-event census series")
    audit.set_defaults(func=_cmd_audit)

    verify = sub.add_parser("verify", help="oracle-equivalence and invariant suites")
    verify.add_argument("--instances", type=int, default=50)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--script-ops", type=int, default=2000)
    verify.add_argument("--isolation-rounds", type=int, default=100)
    verify.add_argument(
        "--inject-fault",
        choices=("block-table",),
        default=None,
        help="deliberately corrupt state to prove the checks can fail",
    )
    verify.set_defaults(func=_cmd_verify)

    dump = sub.add_parser("trace-dump", help="emit a scenario trace as line-delimited JSON")
    _add_common(dump)
    _add_model(dump)
    dump.add_argument("--scenario", choices=SCENARIOS, default="mixed")
    dump.add_argument("--single-len", type=int, default=4096)
    dump.add_argument("--chat-start", type=int, default=1024)
    dump.add_argument("--chat-end", type=int, default=4096)
    dump.set_defaults(func=_cmd_trace_dump)

    return parser


def _config_from_args(args) -> RunConfig:
    config = RunConfig(
        page_size=args.page_size,
        pool_pages=args.pool_pages,
        seed=args.seed,
        out_format=args.out_format,
        out_path=args.out_path,
        layers=getattr(args, "layers", 2),
        head_count=getattr(args, "heads", 4),
        head_dim=getattr(args, "head_dim", 16),
        vocab=getattr(args, "vocab", 256),
    )
    if hasattr(args, "scenario"):
        config.scenario = args.scenario
    if hasattr(args, "seq_lens"):
        config.seq_lens = args.seq_lens
    if hasattr(args, "mode"):
        config.mode = args.mode
    if hasattr(args, "bytes_per_scalar"):
        config.bytes_per_scalar = args.bytes_per_scalar
    if getattr(args, "max_len", None) is not None:
        config.contiguous_max_len = args.max_len
    for name in ("single_len", "chat_start", "chat_end"):
        if hasattr(args, name):
            setattr(config, name, getattr(args, name))
    return config


def _cmd_bench(args) -> int:
    config = _config_from_args(args)
    report = run_bench(config)
    text = write_report(report.to_dict(), config, csv_renderer=lambda _: report.to_csv())
    if not config.out_path:
        sys.stdout.write(text)
    else:
        print(f"wrote {config.out_path}")
    return 0


def _cmd_audit(args) -> int:
    config = _config_from_args(args)
    audit = run_audit(config, include_series=not args.no_series)
    text = write_report(audit, config, csv_renderer=audit_to_csv)
    if not config.out_path:
        sys.stdout.write(text)
    else:
        print(f"wrote {config.out_path}")
    return 0


def _cmd_verify(args) -> int:
    result = run_verification(
        instances=args.instances,
        seed=args.seed,
        script_ops=args.script_ops,
        isolation_rounds=args.isolation_rounds,
        inject_fault=args.inject_fault,
    )
    for check in result.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: {check.detail}")
    print(f"verify: {'ok' if result.passed else 'FAILED'} "
          f"({result.instances} instances, seed {result.seed})")
    return 0 if result.passed else 1


def _cmd_trace_dump(args) -> int:
    config = _config_from_args(args)
    config.validate()
    trace = build_trace(config)
    text = trace.to_jsonl()
    if config.out_path:
        with open(config.out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {config.out_path}")
    else:
        sys.stdout.write(text)
    print(f"trace {trace.name} events={len(trace.events)} sha256={trace.stable_hash()}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PagedKvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
