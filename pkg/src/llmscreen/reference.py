"""Published reference values and deterministic synthetic fixtures.

The review table holds the per-review search sizes and included-study
counts of the 23 Cochrane reviews used as the benchmark. The result tables
are printed rates at three decimals, in column order of ``METRICS``.
"""

from __future__ import annotations

from typing import Mapping, Sequence

from .corpus import GroundTruth, Record
from .evaluation import METRICS, ConfusionMatrix, round_half_away
from .protocol import ReviewProtocol, Verdict

# lead author -> (records returned by the replicated search, included studies)
REVIEWS: dict[str, tuple[int, int]] = {
    "Bellon": (3693, 23),
    "Buchan": (5043, 4),
    "Clezar": (6476, 31),
    "Cutting": (3092, 3),
    "Dopper": (8768, 8),
    "Ghoraba": (2690, 5),
    "Hjetland": (6238, 12),
    "Karkou": (706, 3),
    "Lin": (773, 16),
    "Lynch": (20319, 7),
    "Malik": (3685, 20),
    "Mohamed": (304, 11),
    "Roy": (5891, 28),
    "Santos": (17380, 5),
    "Sethawong": (1880, 21),
    "Sevaux": (10826, 4),
    "Singh-1": (195, 17),
    "Singh-2": (312, 16),
    "Sulewski": (7016, 9),
    "Sulisty": (189, 0),
    "White": (13549, 22),
    "Younis": (425, 2),
    "Zhu": (246, 4),
}

SUBSET_SIZE = 800
SUBSET_POSITIVES = 271
SUBSET_NEGATIVES = 529
FULL_CORPUS_ELIGIBLE = 119_695
FULL_CORPUS_RAW = 128_299
FULL_CORPUS_MISSING_ABSTRACT = 8_604

# 800-record subset; columns follow METRICS
SUBSET_RESULTS: dict[str, tuple[float, ...]] = {
    "Alpha": (0.745, 0.962, 0.854, 0.910, 0.881, 0.819),
    "Bravo": (0.720, 0.964, 0.842, 0.911, 0.870, 0.804),
    "Charlie": (0.775, 0.955, 0.865, 0.897, 0.892, 0.832),
    "GPT-3.5": (1.000, 0.393, 0.697, 0.458, 1.000, 0.628),
    "GPT-4": (0.605, 0.975, 0.857, 0.927, 0.828, 0.732),
    "GPT-4o": (0.911, 0.896, 0.904, 0.818, 0.952, 0.862),
    "Gemini 1.5 Pro": (0.760, 0.943, 0.852, 0.873, 0.885, 0.813),
    "LLaMA 3": (0.871, 0.675, 0.773, 0.578, 0.911, 0.695),
    "Sonnet 3.5": (0.819, 0.966, 0.893, 0.925, 0.913, 0.869),
}
HUMAN_SCREENERS = ("Alpha", "Bravo", "Charlie")

# every record of the replicated searches, plus the original reviewers' ceiling
FULL_RESULTS: dict[str, tuple[float, ...]] = {
    "Cochrane": (1.000, 0.993, 0.996, 0.235, 1.000, 0.381),
    "GPT-3.5": (1.000, 0.419, 0.710, 0.004, 1.000, 0.008),
    "GPT-4o": (0.904, 0.949, 0.926, 0.038, 1.000, 0.074),
    "Gemini 1.5 Pro": (0.756, 0.976, 0.866, 0.068, 0.999, 0.125),
    "LLaMA 3": (0.841, 0.776, 0.809, 0.008, 1.000, 0.017),
    "Sonnet 3.5": (0.823, 0.982, 0.903, 0.096, 1.000, 0.172),
}
FULL_POSITIVES = 271
FULL_NEGATIVES = FULL_CORPUS_ELIGIBLE - FULL_POSITIVES


def as_metrics(row: Sequence[float]) -> dict[str, float]:
    return dict(zip(METRICS, row))


def counts_from_rates(
    sensitivity: float, specificity: float, positives: int, negatives: int
) -> ConfusionMatrix:
    """Nearest integer confusion matrix for printed sensitivity and specificity."""
    tp = int(round_half_away(sensitivity * positives, 0))
    tn = int(round_half_away(specificity * negatives, 0))
    return ConfusionMatrix(tp=tp, tn=tn, fp=negatives - tn, fn=positives - tp)


def counts_from_precision(
    sensitivity: float, precision: float, positives: int, negatives: int
) -> ConfusionMatrix:
    """Back-solve false positives from precision: fp = tp (1 - p) / p."""
    tp = int(round_half_away(sensitivity * positives, 0))
    fp = int(round_half_away(tp * (1 - precision) / precision, 0))
    return ConfusionMatrix(tp=tp, tn=negatives - fp, fp=fp, fn=positives - tp)


def subset_matrix(name: str) -> ConfusionMatrix:
    sens, spec = SUBSET_RESULTS[name][:2]
    return counts_from_rates(sens, spec, SUBSET_POSITIVES, SUBSET_NEGATIVES)


# --------------------------------------------------------------------------
# synthetic fixtures


def review_id_for(author: str) -> str:
    return author.lower()


def synthetic_records(
    include_counts: Mapping[str, int],
    excludes_per_review: int | Mapping[str, int],
    year: int = 2020,
) -> list[Record]:
    """Labelled placeholder records: per review, its positives then its negatives."""
    out = []
    for author, n_inc in include_counts.items():
        rid = review_id_for(author)
        n_exc = excludes_per_review if isinstance(excludes_per_review, int) else excludes_per_review[author]
        for i in range(n_inc + n_exc):
            label = GroundTruth.INCLUDED if i < n_inc else GroundTruth.EXCLUDED
            out.append(
                Record(
                    record_id=f"{rid}-{i:06d}",
                    review_id=rid,
                    title=f"{author} study {i}",
                    abstract=f"Abstract of {author} study {i}.",
                    year=year,
                    ground_truth=label,
                )
            )
    return out


def synthetic_protocols(authors, search_year: int = 2023) -> dict[str, ReviewProtocol]:
    return {
        review_id_for(a): ReviewProtocol(
            review_id=review_id_for(a),
            review_title=f"Review led by {a}",
            inclusion_criteria=("Randomised controlled trials", "Adult participants"),
            exclusion_criteria=("Animal studies",),
            search_year=search_year,
        )
        for a in authors
    }


def column_from_counts(records: Sequence[Record], tp: int, fp: int) -> dict[str, Verdict]:
    """Decisions including the first ``tp`` positives and first ``fp`` negatives.

    All columns built this way nest: a column with fewer false positives
    has its false positives inside those of any column with more, and
    likewise for true positives.
    """
    pos = [r.record_id for r in records if r.ground_truth is GroundTruth.INCLUDED]
    neg = [r.record_id for r in records if r.ground_truth is GroundTruth.EXCLUDED]
    if not (0 <= tp <= len(pos) and 0 <= fp <= len(neg)):
        raise ValueError("counts exceed the available records")
    include = set(pos[:tp]) | set(neg[:fp])
    return {
        r.record_id: Verdict.INCLUDE if r.record_id in include else Verdict.EXCLUDE
        for r in records
        if r.ground_truth is not GroundTruth.UNLABELLED
    }


def subset_fixture() -> list[Record]:
    """An 800-record subset shaped like the benchmark (23 negatives per review)."""
    return synthetic_records({a: n for a, (_, n) in REVIEWS.items()}, 23)
