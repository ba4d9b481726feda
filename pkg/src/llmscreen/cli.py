"""Command line entry point: ``llmscreen <subcommand>``.

Stages compose through files: RIS -> corpus -> subset -> decision store ->
reports. Every run writes ``<output>.manifest.json`` next to its main
output, recording input digests, flags and timestamps.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .corpus import (
    CorpusError,
    MalformedRecord,
    SubsetSpec,
    build_balanced_subset,
    dumps_corpus,
    group_by_review,
    ingest,
    load_inclusion_list,
    read_corpus,
)
from .engine import DecisionStore, EngineError, ScreeningSource, import_human_decisions, run_screening
from .ensemble import ENSEMBLE_COLUMNS, EnsembleConfig, EnsembleMode, all_pairs, evaluate_ensembles
from .evaluation import (
    REPORT_COLUMNS,
    EvaluationError,
    RecordSetMismatch,
    cohen_kappa,
    evaluate_source,
    rows_to_csv,
    rows_to_json,
)
from .gateway import CacheMode, GatewayError, ModelClient, ResponseCache, load_backend_file, utc_now
from .protocol import BiasLevel, Dialect, ProtocolError, load_protocol, load_protocols, load_prompt_file

log = logging.getLogger("llmscreen")

KAPPA_COLUMNS = ("source_a", "source_b", "review_id", "n", "observed_agreement", "expected_agreement", "kappa")


class UsageError(Exception):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_files(paths: Sequence[str | Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(sha256_file(p).encode())
    return h.hexdigest()


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def write_manifest(output: str | Path, args: argparse.Namespace, started_at: str, **digests) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "flags": flags,
        "tool_version": __version__,
        "config_digest": digests.get("config_digest"),
        "prompt_file_digest": digests.get("prompt_file_digest"),
        "corpus_digest": digests.get("corpus_digest"),
        "started_at": started_at,
        "finished_at": utc_now(),
    }
    write_text(f"{output}.manifest.json", json.dumps(manifest, indent=2, default=str) + "\n")


def _write_report(path: str, rows: list[dict], columns: Sequence[str], fmt: str | None) -> None:
    fmt = fmt or ("json" if path.endswith(".json") else "csv")
    if fmt == "json":
        write_text(path, rows_to_json(rows))
    else:
        write_text(path, rows_to_csv(rows, columns))


# --------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    started = utc_now()
    protocol = load_protocol(args.protocol)
    inclusion = load_inclusion_list(args.inclusion) if args.inclusion else []
    blobs = [(str(p), Path(p).read_bytes()) for p in args.ris]
    result = ingest(blobs, protocol.review_id, protocol.search_year, inclusion)
    malformed = [e for e in result.errors if isinstance(e, MalformedRecord)]
    for err in result.errors:
        log.error("%s", err)
    if malformed and not args.lenient:
        log.error("%d malformed records; rerun with --lenient to skip them", len(malformed))
        return 1
    write_text(args.output, dumps_corpus(result.records))
    kept = result.kept
    log.info(
        "%s: %d records, %d kept, %d included, %d unmatched inclusion entries",
        protocol.review_id,
        len(result.records),
        len(kept),
        sum(r.ground_truth.value == "IncludedInReview" for r in kept),
        len(result.unmatched),
    )
    write_manifest(args.output, args, started, corpus_digest=sha256_files(args.ris))
    return 0


def cmd_sample(args) -> int:
    started = utc_now()
    records = [r for path in args.corpus for r in read_corpus(path)]
    spec = SubsetSpec(seed=args.seed, excludes_per_review=args.excludes_per_review)
    subset = build_balanced_subset(group_by_review(records), spec)
    write_text(args.output, dumps_corpus(subset))
    log.info("subset of %d records from %d reviews", len(subset), len({r.review_id for r in subset}))
    write_manifest(args.output, args, started, corpus_digest=sha256_files(args.corpus))
    return 0


def cmd_screen(args) -> int:
    started = utc_now()
    backends, policy = load_backend_file(args.backend_config)
    if args.model not in backends:
        raise UsageError(f"model {args.model!r} not in {args.backend_config} (have {sorted(backends)})")
    cfg = backends[args.model]
    if args.concurrency:
        cfg = dataclasses.replace(cfg, concurrency=args.concurrency)
    mode = CacheMode(args.cache_mode)
    if mode is not CacheMode.OFF and not args.cache:
        raise UsageError(f"--cache-mode {mode.value} needs --cache")
    cache = ResponseCache(args.cache) if args.cache else None
    if cache is not None and mode is CacheMode.OFF:
        mode = CacheMode.RECORD_REPLAY
    client = ModelClient(cfg, policy, cache=cache, mode=mode, seed=args.seed)

    prompts = load_prompt_file(args.prompt_file)
    spec = prompts[BiasLevel.parse(args.bias)]
    if cfg.special_token_wrap:
        spec = spec.with_dialect(Dialect.SPECIAL_TOKEN_WRAPPED)
    protocols = load_protocols(args.protocol)
    records = read_corpus(args.corpus)
    store = DecisionStore(args.store)
    source = ScreeningSource.model(args.model, spec.bias, args.trial)
    if args.trial > 1 and cache is not None:
        log.warning("trial %d reuses cache %s; use a fresh cache for independent repeat trials", args.trial, args.cache)
    try:
        summary = run_screening(records, protocols, spec, client, store, source)
    finally:
        log.info("network calls: %d", client.network_calls)
    log.info(
        "%s: %d records, %d include, %d exclude, %d fallback, %d errors, %d written",
        source.display_name,
        summary.n_records,
        summary.include,
        summary.exclude,
        summary.fallback,
        summary.errors,
        summary.written,
    )
    write_manifest(
        args.store,
        args,
        started,
        config_digest=sha256_file(args.backend_config),
        prompt_file_digest=prompts.sha256,
        corpus_digest=sha256_file(args.corpus),
    )
    return 0


def _sources(store: DecisionStore, names: Sequence[str] | None) -> list[ScreeningSource]:
    if not names:
        return store.sources()
    out = []
    for name in names:
        try:
            out.append(store.resolve(name))
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from None
    return out


def cmd_evaluate(args) -> int:
    started = utc_now()
    records = read_corpus(args.corpus)
    store = DecisionStore(args.store)
    rows = []
    for source in _sources(store, args.sources):
        decisions = store.decisions_for(source)
        for row in evaluate_source(source.display_name, decisions, records, per_review=args.per_review):
            rows.append(row.as_dict())
    _write_report(args.output, rows, REPORT_COLUMNS, args.format)
    write_manifest(args.output, args, started, corpus_digest=sha256_files([args.corpus, args.store]))
    return 0


def cmd_ensemble(args) -> int:
    started = utc_now()
    records = read_corpus(args.corpus)
    store = DecisionStore(args.store)
    modes = list(EnsembleMode) if args.mode == "both" else [EnsembleMode(args.mode)]
    if args.all_pairs:
        configs = all_pairs(_sources(store, args.sources), modes)
    else:
        if not args.components or len(args.components) != 2:
            raise UsageError("--components takes exactly two sources")
        a, b = _sources(store, args.components)
        if a == b:
            raise UsageError(f"--components lists {a.display_name} twice")
        configs = [EnsembleConfig(m, a, b) for m in modes]
    truth = {r.record_id: r.ground_truth for r in records}
    results = evaluate_ensembles(store, truth, configs)
    _write_report(args.output, [r.as_dict() for r in results], ENSEMBLE_COLUMNS + REPORT_COLUMNS[2:], args.format)
    write_manifest(args.output, args, started, corpus_digest=sha256_files([args.corpus, args.store]))
    return 0


def _kappa_rows(store, records, a: ScreeningSource, b: ScreeningSource, per_review: bool) -> list[dict]:
    col_a, col_b = store.decisions_for(a), store.decisions_for(b)
    groups = {"*": [r.record_id for r in records]}
    if per_review:
        groups = {}
        for r in records:
            groups.setdefault(r.review_id, []).append(r.record_id)
    rows = []
    for review_id in sorted(groups):
        ids = groups[review_id]
        sub_a = {i: col_a[i] for i in ids if i in col_a}
        sub_b = {i: col_b[i] for i in ids if i in col_b}
        if len(sub_a) != len(ids) or len(sub_b) != len(ids):
            raise RecordSetMismatch(
                f"{a.display_name} vs {b.display_name}: not every record decided by both"
            )
        rep = cohen_kappa(sub_a, sub_b)
        rows.append(
            {
                "source_a": a.display_name,
                "source_b": b.display_name,
                "review_id": review_id,
                "n": rep.n,
                "observed_agreement": rep.observed_agreement,
                "expected_agreement": rep.expected_agreement,
                "kappa": rep.kappa,
            }
        )
    return rows


def cmd_kappa(args) -> int:
    started = utc_now()
    store = DecisionStore(args.store)
    records = read_corpus(args.corpus) if args.corpus else None
    pairs: list[tuple[ScreeningSource, ScreeningSource]] = []
    if args.repeat_trials:
        by_arm: dict[tuple[str, str], list[ScreeningSource]] = {}
        for s in store.sources():
            if not s.is_human:
                by_arm.setdefault((s.name, s.bias.value), []).append(s)
        for arm in sorted(by_arm):
            trials = sorted(by_arm[arm], key=lambda s: s.trial_index)
            pairs += [(trials[0], t) for t in trials[1:]]
    else:
        if not (args.source_a and args.source_b):
            raise UsageError("give --source-a and --source-b, or --repeat-trials")
        a, b = _sources(store, [args.source_a, args.source_b])
        pairs.append((a, b))
    rows = []
    for a, b in pairs:
        if records is None:
            col_a, col_b = store.decisions_for(a), store.decisions_for(b)
            rep = cohen_kappa(col_a, col_b)
            rows.append(
                {
                    "source_a": a.display_name,
                    "source_b": b.display_name,
                    "review_id": "*",
                    "n": rep.n,
                    "observed_agreement": rep.observed_agreement,
                    "expected_agreement": rep.expected_agreement,
                    "kappa": rep.kappa,
                }
            )
        else:
            rows += _kappa_rows(store, records, a, b, args.per_review)
    _write_report(args.output, rows, KAPPA_COLUMNS, args.format)
    write_manifest(args.output, args, started, corpus_digest=sha256_file(args.store))
    return 0


def cmd_import_human(args) -> int:
    started = utc_now()
    records = read_corpus(args.corpus)
    store = DecisionStore(args.store)
    report = import_human_decisions(
        Path(args.csv), args.screener, store, [r.record_id for r in records]
    )
    log.info("imported %d decisions for %s, %d rejected rows", report.imported, args.screener, len(report.errors))
    write_manifest(args.store, args, started, corpus_digest=sha256_files([args.corpus, args.csv]))
    return 1 if report.errors else 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="llmscreen", description="LLM abstract screening pipeline")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="RIS exports -> labelled corpus file")
    s.add_argument("ris", nargs="+", help="RIS search exports for one review")
    s.add_argument("--protocol", required=True, help="review protocol JSON")
    s.add_argument("--inclusion", help="inclusion list (RIS, or CSV title,year)")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--lenient", action="store_true", help="skip malformed RIS records instead of failing")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("sample", help="build the balanced evaluation subset")
    s.add_argument("corpus", nargs="+")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--excludes-per-review", type=int, default=23)
    s.add_argument("--output", "-o", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("screen", help="screen a corpus with one model and prompt")
    s.add_argument("corpus")
    s.add_argument("--protocol", action="append", required=True, help="protocol JSON (repeatable)")
    s.add_argument("--model", required=True, help="backend name in the backend config")
    s.add_argument("--bias", required=True, choices=[b.value for b in BiasLevel])
    s.add_argument("--backend-config", required=True)
    s.add_argument("--cache-mode", choices=[m.value for m in CacheMode], default="off")
    s.add_argument("--cache", help="response cache file (JSONL)")
    s.add_argument("--store", required=True, help="decision store file (JSONL)")
    s.add_argument("--trial", type=int, default=1)
    s.add_argument("--prompt-file", help="prompt templates (default: bundled canonical set)")
    s.add_argument("--concurrency", type=int)
    s.add_argument("--seed", type=int, help="seed for retry jitter")
    s.set_defaults(func=cmd_screen)

    s = sub.add_parser("import-human", help="import a human screener's decisions")
    s.add_argument("csv", help="CSV with header record_id,verdict")
    s.add_argument("--screener", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--store", required=True)
    s.set_defaults(func=cmd_import_human)

    s = sub.add_parser("evaluate", help="metrics per source")
    s.add_argument("--store", required=True)
    s.add_argument("--corpus", required=True, help="the evaluated record set")
    s.add_argument("--sources", nargs="+", help="source keys or display names (default: all)")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--per-review", action="store_true")
    g.add_argument("--pooled", action="store_true", help="one row per source (default)")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--format", choices=["csv", "json"])
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ensemble", help="series/parallel pairs of sources")
    s.add_argument("--store", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--mode", choices=["series", "parallel", "both"], default="both")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--components", nargs="+")
    g.add_argument("--all-pairs", action="store_true")
    s.add_argument("--sources", nargs="+", help="restrict --all-pairs to these sources")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--format", choices=["csv", "json"])
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("kappa", help="Cohen's kappa between two decision columns")
    s.add_argument("--store", required=True)
    s.add_argument("--corpus", help="restrict to this record set (needed for --per-review)")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--source-a")
    g.add_argument("--repeat-trials", action="store_true")
    s.add_argument("--source-b")
    s.add_argument("--per-review", action="store_true")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--format", choices=["csv", "json"])
    s.set_defaults(func=cmd_kappa)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "kappa" and args.per_review and not args.corpus:
        parser.error("--per-review needs --corpus")
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (CorpusError, ProtocolError, GatewayError, EngineError, EvaluationError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
