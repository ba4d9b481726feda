"""Pairwise ensembles of decision sources: series (AND) and parallel (OR)."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from .corpus import GroundTruth
from .engine import DecisionStore, ScreeningSource
from .evaluation import ConfusionMatrix, MetricsReport, MissingDecision, compute_metrics, tabulate_confusion
from .protocol import Verdict

ENSEMBLE_COLUMNS = ("mode", "component_a", "component_b", "config_class")


class EnsembleMode(str, Enum):
    SERIES = "series"
    PARALLEL = "parallel"


class ConfigClass(str, Enum):
    LLM_LLM = "LLM+LLM"
    LLM_HUMAN = "LLM+Human"
    HUMAN_HUMAN = "Human+Human"


def combine_pair(a: Verdict, b: Verdict, mode: EnsembleMode) -> Verdict:
    for v in (a, b):
        if v not in (Verdict.INCLUDE, Verdict.EXCLUDE):
            raise ValueError(f"cannot combine {v}")
    inc_a, inc_b = a is Verdict.INCLUDE, b is Verdict.INCLUDE
    include = (inc_a and inc_b) if mode is EnsembleMode.SERIES else (inc_a or inc_b)
    return Verdict.INCLUDE if include else Verdict.EXCLUDE


@dataclass(frozen=True)
class EnsembleConfig:
    mode: EnsembleMode
    component_a: ScreeningSource
    component_b: ScreeningSource

    def __post_init__(self):
        if self.component_a == self.component_b:
            raise ValueError(f"cannot combine {self.component_a.display_name} with itself")

    @property
    def config_class(self) -> ConfigClass:
        humans = self.component_a.is_human + self.component_b.is_human
        return (ConfigClass.LLM_LLM, ConfigClass.LLM_HUMAN, ConfigClass.HUMAN_HUMAN)[humans]

    def sort_key(self) -> tuple:
        return (self.mode.value, self.component_a.display_name, self.component_b.display_name)


@dataclass(frozen=True)
class EnsembleResult:
    config: EnsembleConfig
    matrix: ConfusionMatrix
    metrics: MetricsReport

    def as_dict(self, places: int | None = 3) -> dict:
        vals = self.metrics.rounded(places) if places is not None else self.metrics.as_dict()
        return {
            "mode": self.config.mode.value,
            "component_a": self.config.component_a.display_name,
            "component_b": self.config.component_b.display_name,
            "config_class": self.config.config_class.value,
            "tp": self.matrix.tp,
            "tn": self.matrix.tn,
            "fp": self.matrix.fp,
            "fn": self.matrix.fn,
            **vals,
            "zero_positive_rule_applied": self.metrics.zero_positive_rule_applied,
        }


def combine_columns(
    a: Mapping[str, Verdict], b: Mapping[str, Verdict], mode: EnsembleMode, record_ids: Iterable[str]
) -> dict[str, Verdict]:
    return {rid: combine_pair(a[rid], b[rid], mode) for rid in record_ids}


def all_pairs(
    sources: Sequence[ScreeningSource], modes: Iterable[EnsembleMode] = tuple(EnsembleMode)
) -> list[EnsembleConfig]:
    """Every unordered pair of distinct sources under each mode."""
    return [EnsembleConfig(m, a, b) for m in modes for a, b in combinations(sources, 2)]


def evaluate_ensembles(
    store: DecisionStore,
    ground_truth: Mapping[str, GroundTruth],
    configs: Iterable[EnsembleConfig],
) -> list[EnsembleResult]:
    """Combine verdicts record by record, then tabulate each ensemble.

    Results are ordered by (mode, component_a, component_b) display names.
    """
    ids = list(ground_truth)
    columns: dict[ScreeningSource, dict[str, Verdict]] = {}
    results = []
    for cfg in configs:
        for comp in (cfg.component_a, cfg.component_b):
            if comp not in columns:
                col = store.decisions_for(comp)
                missing = [rid for rid in ids if rid not in col]
                if missing:
                    raise MissingDecision(comp.display_name, missing)
                columns[comp] = col
        combined = combine_columns(columns[cfg.component_a], columns[cfg.component_b], cfg.mode, ids)
        cm = tabulate_confusion(combined, ground_truth, ids)
        results.append(EnsembleResult(cfg, cm, compute_metrics(cm)))
    return sorted(results, key=lambda r: r.config.sort_key())
