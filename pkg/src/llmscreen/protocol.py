"""Review protocols, the bias-ladder prompt templates and verdict parsing."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping

from .corpus import Record

log = logging.getLogger(__name__)

PLACEHOLDERS = (
    "review_title",
    "inclusion_list",
    "exclusion_list",
    "record_title",
    "record_abstract",
)
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")
_SECTION_RE = re.compile(r"^===\s*([A-Za-z_]+)\s*===\s*$")
_WORD_RE = re.compile(r"[a-z]+")

CANONICAL_PROMPT_FILE = "canonical_v1.txt"


class ProtocolError(Exception):
    pass


class MissingAbstract(ProtocolError):
    pass


class PromptFileError(ProtocolError):
    pass


class BiasLevel(str, Enum):
    TITLE_ONLY = "title_only"
    NONE = "none"
    MILD = "mild"
    MODERATE = "moderate"
    HEAVY = "heavy"
    EXTREME = "extreme"

    @property
    def rank(self) -> int:
        return _BIAS_ORDER.index(self)

    # str's lexical comparisons would otherwise win
    def __lt__(self, other):
        if not isinstance(other, BiasLevel):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other):
        if not isinstance(other, BiasLevel):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other):
        if not isinstance(other, BiasLevel):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other):
        if not isinstance(other, BiasLevel):
            return NotImplemented
        return self.rank >= other.rank


    @classmethod
    def parse(cls, text: str) -> "BiasLevel":
        key = text.strip().lower().replace("-", "_").replace(" ", "_")
        if key in ("titleonly", "title"):
            key = "title_only"
        return cls(key)


_BIAS_ORDER = list(BiasLevel)


class Dialect(str, Enum):
    PLAIN = "plain"
    SPECIAL_TOKEN_WRAPPED = "special_token_wrapped"


class Verdict(str, Enum):
    INCLUDE = "Include"
    EXCLUDE = "Exclude"
    UNINTERPRETABLE = "Uninterpretable"


@dataclass(frozen=True)
class ReviewProtocol:
    review_id: str
    review_title: str
    inclusion_criteria: tuple[str, ...]
    exclusion_criteria: tuple[str, ...]
    search_year: int

    def __post_init__(self):
        if not self.inclusion_criteria:
            raise ProtocolError(f"{self.review_id}: at least one inclusion criterion required")

    @classmethod
    def from_json(cls, obj: Mapping) -> "ReviewProtocol":
        return cls(
            review_id=str(obj["review_id"]),
            review_title=obj["review_title"],
            inclusion_criteria=tuple(obj["inclusion_criteria"]),
            exclusion_criteria=tuple(obj.get("exclusion_criteria", ())),
            search_year=int(obj["search_year"]),
        )

    def to_json(self) -> dict:
        return {
            "review_id": self.review_id,
            "review_title": self.review_title,
            "inclusion_criteria": list(self.inclusion_criteria),
            "exclusion_criteria": list(self.exclusion_criteria),
            "search_year": self.search_year,
        }


def load_protocol(path: str | Path) -> ReviewProtocol:
    return ReviewProtocol.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def load_protocols(paths) -> dict[str, ReviewProtocol]:
    """Load protocol files; a file may hold one object or a list of them."""
    out: dict[str, ReviewProtocol] = {}
    for path in paths:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        for obj in data if isinstance(data, list) else [data]:
            proto = ReviewProtocol.from_json(obj)
            if proto.review_id in out:
                raise ProtocolError(f"duplicate protocol for review {proto.review_id!r}")
            out[proto.review_id] = proto
    return out


@dataclass(frozen=True)
class PromptSpec:
    bias: BiasLevel
    template: str
    dialect: Dialect = Dialect.PLAIN

    def __post_init__(self):
        counts = {name: self.template.count("{" + name + "}") for name in PLACEHOLDERS}
        if self.bias is BiasLevel.TITLE_ONLY:
            if counts.pop("record_abstract"):
                raise PromptFileError("title-only template must not reference {record_abstract}")
        bad = [name for name, n in counts.items() if n != 1]
        if bad:
            raise PromptFileError(
                f"{self.bias.value} template must contain each of {bad} exactly once"
            )

    def with_dialect(self, dialect: Dialect) -> "PromptSpec":
        return PromptSpec(self.bias, self.template, dialect)


@dataclass(frozen=True)
class PromptSet:
    specs: Mapping[BiasLevel, PromptSpec]
    sha256: str
    source: str

    def __getitem__(self, bias: BiasLevel) -> PromptSpec:
        return self.specs[bias]


def parse_prompt_file(text: str, source: str = "<string>") -> PromptSet:
    sections: dict[BiasLevel, list[str]] = {}
    current: list[str] | None = None
    for line in text.splitlines():
        m = _SECTION_RE.match(line)
        if m:
            try:
                bias = BiasLevel.parse(m.group(1))
            except ValueError:
                raise PromptFileError(f"{source}: unknown bias level {m.group(1)!r}") from None
            if bias in sections:
                raise PromptFileError(f"{source}: duplicate section {bias.value}")
            current = sections[bias] = []
        elif current is not None:
            current.append(line)
    missing = [b.value for b in BiasLevel if b not in sections]
    if missing:
        raise PromptFileError(f"{source}: missing sections {missing}")
    specs = {b: PromptSpec(b, "\n".join(lines).strip() + "\n") for b, lines in sections.items()}
    return PromptSet(specs, hashlib.sha256(text.encode("utf-8")).hexdigest(), source)


def load_prompt_file(path: str | Path | None = None) -> PromptSet:
    """Load a prompt file, defaulting to the bundled canonical templates.

    The file's SHA-256 is logged so runs can be tied to exact wordings.
    """
    if path is None:
        text = resources.files(__package__).joinpath("prompts", CANONICAL_PROMPT_FILE).read_text(
            encoding="utf-8"
        )
        source = f"{__package__}/prompts/{CANONICAL_PROMPT_FILE}"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    prompts = parse_prompt_file(text, source)
    log.info("loaded prompt file %s sha256=%s", source, prompts.sha256)
    return prompts


def numbered(items) -> str:
    return "\n".join(f"{i}. {item}" for i, item in enumerate(items, start=1))


def render_prompt(
    spec: PromptSpec,
    protocol: ReviewProtocol,
    record: Record,
    wrap: tuple[str, str] | None = None,
) -> str:
    """Fill a template for one record.

    Substitution is a single pass, so braces or placeholder names inside
    record text are left untouched. ``wrap`` supplies the begin/end strings
    for the special-token dialect and is required for it.
    """
    if spec.bias is not BiasLevel.TITLE_ONLY and not (record.abstract and record.abstract.strip()):
        raise MissingAbstract(f"record {record.record_id} has no abstract")
    values = {
        "review_title": protocol.review_title,
        "inclusion_list": numbered(protocol.inclusion_criteria),
        "exclusion_list": numbered(protocol.exclusion_criteria) or "None.",
        "record_title": record.title,
        "record_abstract": record.abstract or "",
    }
    text = _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], spec.template)
    if spec.dialect is Dialect.SPECIAL_TOKEN_WRAPPED:
        if wrap is None:
            raise ProtocolError("special-token dialect needs begin/end strings")
        begin, end = wrap
        text = f"{begin}{text}{end}"
    return text


def parse_verdict(raw: str | None) -> Verdict:
    """Map a completion to a verdict by its first alphabetic word.

    ``includ*`` is Include, ``exclud*`` is Exclude. Text mentioning both
    stems, or whose first word is neither, is Uninterpretable.
    """
    if not raw:
        return Verdict.UNINTERPRETABLE
    lowered = raw.lower()
    if "includ" in lowered and "exclud" in lowered:
        return Verdict.UNINTERPRETABLE
    m = _WORD_RE.search(lowered)
    if m is None:
        return Verdict.UNINTERPRETABLE
    word = m.group(0)
    if word.startswith("includ"):
        return Verdict.INCLUDE
    if word.startswith("exclud"):
        return Verdict.EXCLUDE
    return Verdict.UNINTERPRETABLE
