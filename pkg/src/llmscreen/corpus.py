"""Bibliographic ingestion: RIS parsing, cleaning, deduplication, labelling
and construction of the balanced evaluation subset.

Corpus files are line-delimited JSON, one record per line, with the fields
``record_id, review_id, title, abstract, year, authors, ground_truth`` and
an optional ``drop_reason`` for records removed during cleaning.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
import string
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

CORPUS_FIELDS = (
    "record_id",
    "review_id",
    "title",
    "abstract",
    "year",
    "authors",
    "ground_truth",
    "drop_reason",
)

_TAG_LINE = re.compile(r"^([A-Z][A-Z0-9])  - ?(.*)$")
_YEAR_PREFIX = re.compile(r"^\s*(\d{4})")
_PUNCT = str.maketrans({c: " " for c in string.punctuation})


class CorpusError(Exception):
    pass


class MalformedRecord(CorpusError):
    def __init__(self, message: str, line_span: tuple[int, int], source_file: str = ""):
        self.line_span = line_span
        self.source_file = source_file
        where = f"{source_file}:" if source_file else "line "
        super().__init__(f"{where}{line_span[0]}-{line_span[1]}: {message}")


class MissingTitle(CorpusError):
    reason_code = "missing_title"


class InsufficientExcludes(CorpusError):
    def __init__(self, review_id: str, available: int, required: int):
        self.review_id = review_id
        self.available = available
        self.required = required
        super().__init__(
            f"review {review_id!r} has {available} excluded records, {required} required"
        )


class GroundTruth(str, Enum):
    INCLUDED = "IncludedInReview"
    EXCLUDED = "ExcludedFromReview"
    UNLABELLED = "Unlabelled"


class DropReason(str, Enum):
    DUPLICATE = "duplicate"
    MISSING_ABSTRACT = "missing_abstract"
    POST_SEARCH = "published_after_search"


@dataclass(frozen=True)
class RecordDraft:
    raw_tags: tuple[tuple[str, str], ...]
    source_file: str = ""
    line_span: tuple[int, int] = (0, 0)

    def get(self, *tags: str) -> str | None:
        """First value of the first tag in ``tags`` that is present."""
        for tag in tags:
            for t, v in self.raw_tags:
                if t == tag:
                    return v
        return None

    def get_all(self, *tags: str) -> list[str]:
        return [v for t, v in self.raw_tags if t in tags]


@dataclass(frozen=True)
class Record:
    record_id: str
    review_id: str
    title: str
    abstract: str | None = None
    year: int | None = None
    authors: tuple[str, ...] = ()
    ground_truth: GroundTruth = GroundTruth.UNLABELLED
    drop_reason: DropReason | None = None

    def to_json(self) -> dict:
        row = {
            "record_id": self.record_id,
            "review_id": self.review_id,
            "title": self.title,
            "abstract": self.abstract,
            "year": self.year,
            "authors": list(self.authors),
            "ground_truth": self.ground_truth.value,
        }
        if self.drop_reason is not None:
            row["drop_reason"] = self.drop_reason.value
        return row

    @classmethod
    def from_json(cls, row: Mapping) -> "Record":
        drop = row.get("drop_reason")
        return cls(
            record_id=row["record_id"],
            review_id=row["review_id"],
            title=row["title"],
            abstract=row.get("abstract"),
            year=row.get("year"),
            authors=tuple(row.get("authors") or ()),
            ground_truth=GroundTruth(row.get("ground_truth", GroundTruth.UNLABELLED.value)),
            drop_reason=DropReason(drop) if drop else None,
        )


@dataclass(frozen=True)
class SubsetSpec:
    seed: int = 0
    excludes_per_review: int = 23
    include_all_positives: bool = True

    def __post_init__(self):
        if self.excludes_per_review < 0:
            raise ValueError("excludes_per_review must be >= 0")


@dataclass
class ParseResult:
    drafts: list[RecordDraft] = field(default_factory=list)
    errors: list[MalformedRecord] = field(default_factory=list)


# --------------------------------------------------------------------------
# RIS


def _decode(data: bytes | str) -> str:
    if isinstance(data, str):
        return data.lstrip("\ufeff")
    return data.decode("utf-8-sig")


def parse_ris(data: bytes | str, source_file: str = "") -> ParseResult:
    """Split an RIS export into drafts, one per ``TY`` ... ``ER`` block.

    Lines that carry no ``XX  - `` prefix continue the previous tag's value
    and are joined to it with a single space. Malformed blocks (an ``ER``
    with no open ``TY``, a ``TY`` reopened before ``ER``, or a block still
    open at end of input) are collected in ``errors``; parsing carries on.
    """
    result = ParseResult()
    tags: list[list[str]] | None = None
    start = 0

    for lineno, line in enumerate(_decode(data).splitlines(), start=1):
        m = _TAG_LINE.match(line.rstrip())
        if m is None:
            text = line.strip()
            if text and tags:
                tags[-1][1] = f"{tags[-1][1]} {text}" if tags[-1][1] else text
            continue
        tag, value = m.group(1), m.group(2).strip()
        if tag == "TY":
            if tags is not None:
                result.errors.append(
                    MalformedRecord("TY before closing ER", (start, lineno - 1), source_file)
                )
            tags, start = [[tag, value]], lineno
        elif tag == "ER":
            if tags is None:
                result.errors.append(MalformedRecord("ER without TY", (lineno, lineno), source_file))
                continue
            tags.append([tag, value])
            result.drafts.append(
                RecordDraft(tuple((t, v) for t, v in tags), source_file, (start, lineno))
            )
            tags = None
        elif tags is not None:
            tags.append([tag, value])
        # tag lines outside a block (export headers) are ignored

    if tags is not None:
        result.errors.append(
            MalformedRecord("truncated record, no ER before end of file", (start, lineno), source_file)
        )
    return result


def serialize_ris(drafts: Iterable[RecordDraft]) -> str:
    out = []
    for draft in drafts:
        for tag, value in draft.raw_tags:
            out.append(f"{tag}  - {value}")
        out.append("")
    return "\n".join(out)


def _parse_year(text: str | None) -> int | None:
    if not text:
        return None
    m = _YEAR_PREFIX.match(text)
    return int(m.group(1)) if m else None


def to_record(draft: RecordDraft, review_id: str, record_id: str | None = None) -> Record:
    title = draft.get("TI", "T1")
    if not title or not title.strip():
        raise MissingTitle(f"record at lines {draft.line_span[0]}-{draft.line_span[1]} has no TI/T1")
    abstract = draft.get("AB", "N2")
    if abstract is not None and not abstract.strip():
        abstract = None
    year = _parse_year(draft.get("PY")) or _parse_year(draft.get("Y1"))
    if record_id is None:
        record_id = f"{review_id}-L{draft.line_span[0]:06d}"
    return Record(
        record_id=record_id,
        review_id=review_id,
        title=title.strip(),
        abstract=abstract.strip() if abstract else None,
        year=year,
        authors=tuple(draft.get_all("AU", "A1")),
    )


# --------------------------------------------------------------------------
# cleaning


def normalize_title(title: str) -> str:
    return " ".join(title.lower().translate(_PUNCT).split())


def dedup_key(title: str, year: int | None) -> tuple[str, int | None]:
    return normalize_title(title), year


def deduplicate(records: Sequence[Record]) -> tuple[list[Record], list[tuple[Record, Record]]]:
    """Keep the first record for each (normalized title, year) key.

    Returns ``(kept, dropped)`` where each dropped entry pairs the duplicate
    with the kept record it duplicates. Input order is preserved.
    """
    seen: dict[tuple[str, int | None], Record] = {}
    kept: list[Record] = []
    dropped: list[tuple[Record, Record]] = []
    for rec in records:
        key = dedup_key(rec.title, rec.year)
        first = seen.get(key)
        if first is None:
            seen[key] = rec
            kept.append(rec)
        else:
            dropped.append((rec, first))
    return kept, dropped


def clean_records(
    records: Sequence[Record], search_year: int
) -> tuple[list[Record], list[Record], list[Record]]:
    """Drop records without an abstract or published after ``search_year``.

    A missing year is kept since it cannot be shown to post-date the search.
    Dropped records are returned with ``drop_reason`` set.
    """
    kept, no_abstract, post_search = [], [], []
    for rec in records:
        if not rec.abstract or not rec.abstract.strip():
            no_abstract.append(replace(rec, drop_reason=DropReason.MISSING_ABSTRACT))
        elif rec.year is not None and rec.year > search_year:
            post_search.append(replace(rec, drop_reason=DropReason.POST_SEARCH))
        else:
            kept.append(rec)
    return kept, no_abstract, post_search


def attach_ground_truth(
    records: Sequence[Record], inclusion_list: Iterable[tuple[str, int | None]]
) -> tuple[list[Record], list[tuple[str, int | None]]]:
    """Label records against an inclusion list using the dedup key.

    Returns the relabelled records and the inclusion entries that matched
    nothing; each unmatched entry is also logged as a warning.
    """
    wanted = {dedup_key(title, year): (title, year) for title, year in inclusion_list}
    matched = set()
    out = []
    for rec in records:
        key = dedup_key(rec.title, rec.year)
        if key in wanted:
            matched.add(key)
            out.append(replace(rec, ground_truth=GroundTruth.INCLUDED))
        else:
            out.append(replace(rec, ground_truth=GroundTruth.EXCLUDED))
    unmatched = [entry for key, entry in wanted.items() if key not in matched]
    for title, year in unmatched:
        log.warning("unmatched ground-truth entry: %r (%s)", title, year)
    return out, unmatched


def load_inclusion_list(path: str | Path) -> list[tuple[str, int | None]]:
    """Read an inclusion list from RIS or a two-column ``title,year`` CSV."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".csv":
        rows = csv.reader(io.StringIO(_decode(data)))
        entries = []
        for i, row in enumerate(rows):
            if not row or (i == 0 and row[0].strip().lower() == "title"):
                continue
            year = row[1].strip() if len(row) > 1 else ""
            entries.append((row[0].strip(), _parse_year(year)))
    else:
        parsed = parse_ris(data, str(path))
        for err in parsed.errors:
            log.warning("inclusion list: %s", err)
        entries = []
        for d in parsed.drafts:
            title = d.get("TI", "T1")
            if title:
                entries.append((title.strip(), _parse_year(d.get("PY")) or _parse_year(d.get("Y1"))))
    unique: dict[tuple[str, int | None], tuple[str, int | None]] = {}
    for title, year in entries:
        unique.setdefault(dedup_key(title, year), (title, year))
    return list(unique.values())


# --------------------------------------------------------------------------
# subset


def _review_stream(seed: int, review_id: str) -> np.random.Generator:
    # Per-review PCG64 stream: adding or removing a review leaves the other
    # reviews' samples unchanged.
    digest = hashlib.sha256(review_id.encode("utf-8")).digest()
    entropy = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF, *np.frombuffer(digest[:16], dtype="<u4")]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(x) for x in entropy])))


def group_by_review(records: Iterable[Record]) -> dict[str, list[Record]]:
    groups: dict[str, list[Record]] = {}
    for rec in records:
        groups.setdefault(rec.review_id, []).append(rec)
    return groups


def build_balanced_subset(
    corpus: Mapping[str, Sequence[Record]], spec: SubsetSpec = SubsetSpec()
) -> list[Record]:
    """All included records plus a seeded sample of excluded records per review.

    Candidates are ordered by ``record_id`` before sampling with a PCG64
    generator seeded from ``(spec.seed, review_id)``, so the result depends
    only on the corpus content and the seed. Output is grouped by review in
    sorted review order, records within a review sorted by ``record_id``.
    """
    subset: list[Record] = []
    for review_id in sorted(corpus):
        records = sorted(
            (r for r in corpus[review_id] if r.drop_reason is None), key=lambda r: r.record_id
        )
        positives = [r for r in records if r.ground_truth is GroundTruth.INCLUDED]
        negatives = [r for r in records if r.ground_truth is GroundTruth.EXCLUDED]
        k = spec.excludes_per_review
        if len(negatives) < k:
            raise InsufficientExcludes(review_id, len(negatives), k)
        rng = _review_stream(spec.seed, review_id)
        picked = sorted(rng.choice(len(negatives), size=k, replace=False).tolist())
        chosen = (positives if spec.include_all_positives else []) + [negatives[i] for i in picked]
        subset.extend(sorted(chosen, key=lambda r: r.record_id))
    return subset


# --------------------------------------------------------------------------
# corpus files


def dumps_corpus(records: Iterable[Record]) -> str:
    return "".join(
        json.dumps(r.to_json(), ensure_ascii=False, sort_keys=False) + "\n" for r in records
    )


def write_corpus(path: str | Path, records: Iterable[Record]) -> None:
    Path(path).write_text(dumps_corpus(records), encoding="utf-8", newline="\n")


def read_corpus(path: str | Path, include_dropped: bool = False) -> list[Record]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = Record.from_json(json.loads(line))
                if include_dropped or rec.drop_reason is None:
                    out.append(rec)
    return out


@dataclass
class IngestResult:
    records: list[Record]
    errors: list[CorpusError]
    unmatched: list[tuple[str, int | None]]

    @property
    def kept(self) -> list[Record]:
        return [r for r in self.records if r.drop_reason is None]


def ingest(
    ris_blobs: Sequence[tuple[str, bytes]],
    review_id: str,
    search_year: int,
    inclusion_list: Sequence[tuple[str, int | None]] = (),
) -> IngestResult:
    """parse -> to_record -> deduplicate -> clean -> label, over several RIS files.

    ``records`` holds every record in input order, kept and dropped alike;
    dropped ones carry their ``drop_reason`` so the output doubles as an
    audit trail.
    """
    errors: list[CorpusError] = []
    records: list[Record] = []
    n = 0
    for name, blob in ris_blobs:
        parsed = parse_ris(blob, name)
        errors.extend(parsed.errors)
        for draft in parsed.drafts:
            n += 1
            try:
                records.append(to_record(draft, review_id, f"{review_id}-{n:06d}"))
            except MissingTitle as exc:
                errors.append(exc)

    unique, dupes = deduplicate(records)
    kept, no_abstract, post_search = clean_records(unique, search_year)
    labelled, unmatched = attach_ground_truth(kept, inclusion_list)

    final = {r.record_id: r for r in labelled}
    for rec, _first in dupes:
        final[rec.record_id] = replace(rec, drop_reason=DropReason.DUPLICATE)
    for rec in no_abstract + post_search:
        final[rec.record_id] = rec
    ordered = [final[r.record_id] for r in records]
    return IngestResult(ordered, errors, unmatched)
