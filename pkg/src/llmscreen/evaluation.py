"""Confusion matrices, screening metrics, Cohen's kappa and correlation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import GroundTruth, Record
from .protocol import Verdict

METRICS = ("sensitivity", "specificity", "balanced_accuracy", "precision", "npv", "f1")
REPORT_COLUMNS = (
    "source",
    "review_id",
    "tp",
    "tn",
    "fp",
    "fn",
    *METRICS,
    "zero_positive_rule_applied",
)


class EvaluationError(Exception):
    pass


class MissingDecision(EvaluationError):
    def __init__(self, source: str, record_ids: Sequence[str]):
        self.source = source
        self.record_ids = list(record_ids)
        shown = ", ".join(self.record_ids[:5]) + (" ..." if len(self.record_ids) > 5 else "")
        super().__init__(f"{source}: {len(self.record_ids)} records without a decision ({shown})")


class RecordSetMismatch(EvaluationError):
    pass


class DegenerateVariance(EvaluationError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    """Rates in [0, 1]; ``None`` marks an undefined ratio (zero denominator)."""

    sensitivity: float | None
    specificity: float | None
    balanced_accuracy: float | None
    precision: float | None
    npv: float | None
    f1: float | None
    zero_positive_rule_applied: bool = False

    def as_dict(self) -> dict:
        return {m: getattr(self, m) for m in METRICS}

    def rounded(self, places: int = 3) -> dict:
        return {m: round_half_away(v, places) for m, v in self.as_dict().items()}


@dataclass(frozen=True)
class AgreementReport:
    kappa: float | None  # None: degenerate (chance agreement is 1 but raters differ)
    observed_agreement: float
    expected_agreement: float
    n: int

    @property
    def degenerate(self) -> bool:
        return self.kappa is None


def round_half_away(x: float | None, places: int = 3) -> float | None:
    """Decimal rounding with ties away from zero (Python's round() ties to even)."""
    if x is None:
        return None
    q = Decimal(1).scaleb(-places)
    d = Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP)
    return float(d)


def tabulate_confusion(
    decisions: Mapping[str, Verdict],
    ground_truth: Mapping[str, GroundTruth],
    record_ids: Iterable[str] | None = None,
    source: str = "",
) -> ConfusionMatrix:
    """Count tp/tn/fp/fn over ``record_ids`` (default: every labelled record)."""
    ids = list(ground_truth if record_ids is None else record_ids)
    missing = [rid for rid in ids if rid not in decisions]
    if missing:
        raise MissingDecision(source, missing)
    tp = tn = fp = fn = 0
    for rid in ids:
        label = ground_truth[rid]
        include = decisions[rid] is Verdict.INCLUDE
        if label is GroundTruth.INCLUDED:
            if include:
                tp += 1
            else:
                fn += 1
        elif label is GroundTruth.EXCLUDED:
            if include:
                fp += 1
            else:
                tn += 1
        else:
            raise EvaluationError(f"record {rid} has no ground-truth label")
    return ConfusionMatrix(tp, tn, fp, fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Sensitivity, specificity, balanced accuracy, precision, NPV and F1.

    With no positives in the evaluated set, sensitivity is taken as 1.0 and
    ``zero_positive_rule_applied`` is set. Other zero denominators give None.
    """
    zero_pos = cm.positives == 0
    sens = 1.0 if zero_pos else cm.tp / cm.positives
    spec = _ratio(cm.tn, cm.negatives)
    ba = (sens + spec) / 2 if spec is not None else None
    return MetricsReport(
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=ba,
        precision=_ratio(cm.tp, cm.tp + cm.fp),
        npv=_ratio(cm.tn, cm.tn + cm.fn),
        f1=_ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
        zero_positive_rule_applied=zero_pos,
    )


def _aligned(decisions_a: Mapping[str, Verdict], decisions_b: Mapping[str, Verdict]):
    if set(decisions_a) != set(decisions_b):
        only_a = len(set(decisions_a) - set(decisions_b))
        only_b = len(set(decisions_b) - set(decisions_a))
        raise RecordSetMismatch(f"record sets differ ({only_a} only in a, {only_b} only in b)")
    ids = sorted(decisions_a)
    a = np.array([decisions_a[i] is Verdict.INCLUDE for i in ids], dtype=bool)
    b = np.array([decisions_b[i] is Verdict.INCLUDE for i in ids], dtype=bool)
    return a, b


def cohen_kappa(decisions_a: Mapping[str, Verdict], decisions_b: Mapping[str, Verdict]) -> AgreementReport:
    a, b = _aligned(decisions_a, decisions_b)
    n = len(a)
    if n == 0:
        raise RecordSetMismatch("no records to compare")
    po = float(np.mean(a == b))
    pa, pb = float(a.mean()), float(b.mean())
    pe = pa * pb + (1 - pa) * (1 - pb)
    if pe >= 1:
        kappa = 1.0 if po == 1 else None
    else:
        kappa = (po - pe) / (1 - pe)
    return AgreementReport(kappa, po, pe, n)


def kappa_from_vectors(a: Sequence[Verdict], b: Sequence[Verdict]) -> AgreementReport:
    if len(a) != len(b):
        raise RecordSetMismatch("vectors differ in length")
    return cohen_kappa(dict(enumerate(a)), dict(enumerate(b)))


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def r_squared(xs: Sequence[float], ys: Sequence[float]) -> float:
    return pearson_r(xs, ys) ** 2


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvaluationRow:
    source: str
    review_id: str
    matrix: ConfusionMatrix
    metrics: MetricsReport

    def as_dict(self, places: int | None = 3) -> dict:
        vals = self.metrics.rounded(places) if places is not None else self.metrics.as_dict()
        return {
            "source": self.source,
            "review_id": self.review_id,
            "tp": self.matrix.tp,
            "tn": self.matrix.tn,
            "fp": self.matrix.fp,
            "fn": self.matrix.fn,
            **vals,
            "zero_positive_rule_applied": self.metrics.zero_positive_rule_applied,
        }


POOLED = "*"


def evaluate_source(
    source: str,
    decisions: Mapping[str, Verdict],
    records: Sequence[Record],
    per_review: bool = False,
) -> list[EvaluationRow]:
    """Metrics for one decision column, pooled or one row per review."""
    truth = {r.record_id: r.ground_truth for r in records}
    if not per_review:
        cm = tabulate_confusion(decisions, truth, source=source)
        return [EvaluationRow(source, POOLED, cm, compute_metrics(cm))]
    rows = []
    by_review: dict[str, list[str]] = {}
    for r in records:
        by_review.setdefault(r.review_id, []).append(r.record_id)
    for review_id in sorted(by_review):
        cm = tabulate_confusion(decisions, truth, by_review[review_id], source=source)
        rows.append(EvaluationRow(source, review_id, cm, compute_metrics(cm)))
    return rows


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def rows_to_csv(rows: Iterable[dict], columns: Sequence[str] = REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_csv_value(row[c]) for c in columns])
    return buf.getvalue()


def rows_to_json(rows: Iterable[dict]) -> str:
    return json.dumps(list(rows), indent=2, ensure_ascii=False) + "\n"


def paired_review_metric(
    rows_x: Sequence[EvaluationRow],
    rows_y: Sequence[EvaluationRow],
    metric: str,
) -> tuple[list[float], list[float]]:
    """Pair per-review metric values of two groups of sources.

    Every (x source, y source) combination contributes one point per review
    that both evaluated and where both values are defined.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    ys_by_review: dict[str, list[float]] = {}
    for row in rows_y:
        v = getattr(row.metrics, metric)
        if v is not None and row.review_id != POOLED:
            ys_by_review.setdefault(row.review_id, []).append(v)
    xs, ys = [], []
    for row in rows_x:
        v = getattr(row.metrics, metric)
        if v is None or row.review_id == POOLED:
            continue
        for y in ys_by_review.get(row.review_id, ()):
            xs.append(v)
            ys.append(y)
    return xs, ys
