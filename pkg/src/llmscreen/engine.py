"""Screening runs over a record set, persisted to an append-only decision store."""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .corpus import Record
from .gateway import CacheMode, ModelClient, Status, apply_include_fallback, utc_now
from .protocol import BiasLevel, PromptSpec, ReviewProtocol, Verdict, render_prompt

log = logging.getLogger(__name__)

STORE_FORMAT = "llmscreen-decisions"
STORE_VERSION = 1


class EngineError(Exception):
    pass


class DuplicateDecision(EngineError):
    pass


class DuplicateTrial(EngineError):
    pass


class StoreError(EngineError):
    pass


@dataclass(frozen=True)
class ScreeningSource:
    """Identifies one decision column: a model/prompt/trial or a human screener."""

    kind: str
    name: str
    bias: BiasLevel | None = None
    trial_index: int | None = None

    def __post_init__(self):
        if self.kind == "model":
            if self.bias is None or self.trial_index is None or self.trial_index < 1:
                raise ValueError("model source needs a bias level and trial_index >= 1")
        elif self.kind == "human":
            if self.bias is not None or self.trial_index is not None:
                raise ValueError("human source takes no bias or trial")
        else:
            raise ValueError(f"unknown source kind {self.kind!r}")

    @classmethod
    def model(cls, name: str, bias: BiasLevel, trial_index: int = 1) -> "ScreeningSource":
        return cls("model", name, BiasLevel(bias), trial_index)

    @classmethod
    def human(cls, screener_id: str) -> "ScreeningSource":
        return cls("human", screener_id)

    @property
    def is_human(self) -> bool:
        return self.kind == "human"

    @property
    def key(self) -> str:
        if self.is_human:
            return f"human:{self.name}"
        return f"model:{self.name}:{self.bias.value}:{self.trial_index}"

    @property
    def display_name(self) -> str:
        if self.is_human:
            return self.name
        return f"{self.name}/{self.bias.value}#{self.trial_index}"

    @classmethod
    def parse(cls, key: str) -> "ScreeningSource":
        kind, _, rest = key.partition(":")
        if kind == "human" and rest:
            return cls.human(rest)
        if kind == "model":
            parts = rest.rsplit(":", 2)
            if len(parts) == 3:
                try:
                    return cls.model(parts[0], BiasLevel.parse(parts[1]), int(parts[2]))
                except ValueError:
                    pass
        raise ValueError(f"not a source key: {key!r}")

    def __str__(self) -> str:
        return self.key


@dataclass(frozen=True)
class ScreeningDecision:
    record_id: str
    source: ScreeningSource
    verdict: Verdict
    raw_text: str | None = None
    fallback: bool = False
    attempts: int = 0
    created_at: str = ""
    status: str | None = None

    def __post_init__(self):
        if self.verdict not in (Verdict.INCLUDE, Verdict.EXCLUDE):
            raise ValueError("stored verdicts are binary")

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "source": self.source.key,
            "verdict": self.verdict.value,
            "raw_text": self.raw_text,
            "fallback": self.fallback,
            "attempts": self.attempts,
            "created_at": self.created_at,
            "status": self.status,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScreeningDecision":
        return cls(
            record_id=obj["record_id"],
            source=ScreeningSource.parse(obj["source"]),
            verdict=Verdict(obj["verdict"]),
            raw_text=obj.get("raw_text"),
            fallback=bool(obj.get("fallback", False)),
            attempts=int(obj.get("attempts", 0)),
            created_at=obj.get("created_at", ""),
            status=obj.get("status"),
        )


class DecisionStore:
    """Append-only decisions keyed by (record_id, source).

    Backed by a JSONL file with a format header when ``path`` is given.
    Reloading the file reproduces the in-memory state exactly.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._decisions: list[ScreeningDecision] = []
        self._index: dict[tuple[str, str], ScreeningDecision] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            first = fh.readline()
            try:
                header = json.loads(first)
            except ValueError:
                raise StoreError(f"{self.path}: unreadable header") from None
            if header.get("format") != STORE_FORMAT or header.get("version") != STORE_VERSION:
                raise StoreError(f"{self.path}: unsupported header {header}")
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                if not line.endswith("\n"):
                    log.warning("%s: ignoring truncated final line %d", self.path, lineno)
                    break
                d = ScreeningDecision.from_json(json.loads(line))
                if (d.record_id, d.source.key) in self._index:
                    raise StoreError(f"{self.path}:{lineno}: duplicate decision for {d.record_id} / {d.source}")
                self._remember(d)

    def _remember(self, d: ScreeningDecision) -> None:
        self._decisions.append(d)
        self._index[(d.record_id, d.source.key)] = d

    def __len__(self) -> int:
        return len(self._decisions)

    def __iter__(self) -> Iterator[ScreeningDecision]:
        return iter(list(self._decisions))

    def has(self, record_id: str, source: ScreeningSource) -> bool:
        return (record_id, source.key) in self._index

    def get(self, record_id: str, source: ScreeningSource) -> ScreeningDecision | None:
        return self._index.get((record_id, source.key))

    def append(self, decision: ScreeningDecision) -> None:
        with self._lock:
            k = (decision.record_id, decision.source.key)
            if k in self._index:
                raise DuplicateDecision(f"{decision.record_id} already decided by {decision.source}")
            if self.path is not None:
                new_file = not self.path.exists() or self.path.stat().st_size == 0
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    if new_file:
                        fh.write(json.dumps({"format": STORE_FORMAT, "version": STORE_VERSION}) + "\n")
                    fh.write(json.dumps(decision.to_json(), ensure_ascii=False) + "\n")
            self._remember(decision)

    def sources(self) -> list[ScreeningSource]:
        return list(dict.fromkeys(d.source for d in self._decisions))

    def decisions_for(self, source: ScreeningSource) -> dict[str, Verdict]:
        return {d.record_id: d.verdict for d in self._decisions if d.source == source}

    def resolve(self, name: str) -> ScreeningSource:
        """Find a stored source by key or display name."""
        for s in self.sources():
            if name in (s.key, s.display_name):
                return s
        raise KeyError(f"no source {name!r} in store")


@dataclass(frozen=True)
class RunSummary:
    n_records: int
    include: int
    exclude: int
    fallback: int
    errors: int
    written: int = field(default=0, compare=False)


def summarize(records: Sequence[Record], store: DecisionStore, source: ScreeningSource, written: int = 0) -> RunSummary:
    decided = [store.get(r.record_id, source) for r in records]
    decided = [d for d in decided if d is not None]
    return RunSummary(
        n_records=len(records),
        include=sum(d.verdict is Verdict.INCLUDE for d in decided),
        exclude=sum(d.verdict is Verdict.EXCLUDE for d in decided),
        fallback=sum(d.fallback for d in decided),
        errors=sum(d.status not in (None, Status.OK.value) for d in decided),
        written=written,
    )


def _protocol_for(protocols: ReviewProtocol | Mapping[str, ReviewProtocol], record: Record) -> ReviewProtocol:
    if isinstance(protocols, ReviewProtocol):
        return protocols
    try:
        return protocols[record.review_id]
    except KeyError:
        raise EngineError(f"no protocol for review {record.review_id!r}") from None


def run_screening(
    records: Sequence[Record],
    protocols: ReviewProtocol | Mapping[str, ReviewProtocol],
    prompt_spec: PromptSpec,
    client: ModelClient,
    store: DecisionStore,
    source: ScreeningSource | None = None,
) -> RunSummary:
    """Screen every record not yet decided by ``source``.

    Requests run on up to ``client.concurrency`` threads; results are
    written by this thread in input order, so the store content does not
    depend on completion order. An exception stops the run after the
    decisions already written.
    """
    if source is None:
        source = ScreeningSource.model(client.cfg.model_id, prompt_spec.bias, 1)
    pending = [r for r in records if not store.has(r.record_id, source)]
    log.info("%s: %d of %d records to screen", source.display_name, len(pending), len(records))

    def work(rec: Record) -> ScreeningDecision:
        prompt = render_prompt(prompt_spec, _protocol_for(protocols, rec), rec, client.wrap)
        outcome = client.complete(prompt)
        verdict, fallback = apply_include_fallback(outcome)
        return ScreeningDecision(
            record_id=rec.record_id,
            source=source,
            verdict=verdict,
            raw_text=outcome.raw_text,
            fallback=fallback,
            attempts=outcome.attempts,
            created_at=outcome.recorded_at or utc_now(),
            status=outcome.status.value,
        )

    written = 0
    pool = ThreadPoolExecutor(max_workers=max(1, client.concurrency))
    try:
        for decision in pool.map(work, pending):
            store.append(decision)
            written += 1
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    return summarize(records, store, source, written)


def run_repeat_trial(
    records: Sequence[Record],
    protocols: ReviewProtocol | Mapping[str, ReviewProtocol],
    prompt_spec: PromptSpec,
    client: ModelClient,
    store: DecisionStore,
    trial_index: int = 2,
    name: str | None = None,
    resume: bool = False,
) -> RunSummary:
    """Screen the records again as an independent decision column.

    Consistency statistics are only meaningful when ``client`` does not
    share a response cache with the earlier trial.
    """
    source = ScreeningSource.model(name or client.cfg.model_id, prompt_spec.bias, trial_index)
    if not resume and any(s == source for s in store.sources()):
        raise DuplicateTrial(f"trial {trial_index} already stored for {source.name}/{source.bias.value}")
    if client.mode is not CacheMode.OFF:
        log.warning("trial %d shares a response cache; agreement with earlier trials will be trivially high", trial_index)
    return run_screening(records, protocols, prompt_spec, client, store, source)


@dataclass(frozen=True)
class RowError:
    row: int
    record_id: str
    error: str
    message: str


@dataclass
class ImportReport:
    imported: int = 0
    errors: list[RowError] = field(default_factory=list)


def import_human_decisions(
    csv_text: str | Path | io.TextIOBase,
    screener_id: str,
    store: DecisionStore,
    known_record_ids: Iterable[str],
    created_at: str | None = None,
) -> ImportReport:
    """Load a ``record_id,verdict`` CSV as the decisions of one human screener.

    Bad rows (unknown record, verdict other than include/exclude, repeated
    record) are reported with their 1-based row number, header being row 1;
    the remaining rows are imported.
    """
    if isinstance(csv_text, Path):
        csv_text = csv_text.read_text(encoding="utf-8-sig")
    fh = io.StringIO(csv_text) if isinstance(csv_text, str) else csv_text
    known = set(known_record_ids)
    source = ScreeningSource.human(screener_id)
    stamp = created_at or utc_now()
    report = ImportReport()
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or not {"record_id", "verdict"} <= {f.strip() for f in reader.fieldnames}:
        raise EngineError("human decisions CSV needs header record_id,verdict")
    for row_no, row in enumerate(reader, start=2):
        row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
        rid = row["record_id"]
        if rid not in known:
            report.errors.append(RowError(row_no, rid, "UnknownRecord", f"unknown record_id {rid!r}"))
            continue
        try:
            verdict = {"include": Verdict.INCLUDE, "exclude": Verdict.EXCLUDE}[row["verdict"].lower()]
        except KeyError:
            report.errors.append(RowError(row_no, rid, "MalformedVerdict", f"verdict {row['verdict']!r}"))
            continue
        try:
            store.append(ScreeningDecision(rid, source, verdict, created_at=stamp))
        except DuplicateDecision as exc:
            report.errors.append(RowError(row_no, rid, "DuplicateDecision", str(exc)))
            continue
        report.imported += 1
    for err in report.errors:
        log.warning("row %d: %s: %s", err.row, err.error, err.message)
    return report
