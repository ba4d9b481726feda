"""Score decision columns against ground truth and pair them into ensembles."""

from llmscreen.engine import DecisionStore, ScreeningDecision, ScreeningSource
from llmscreen.ensemble import all_pairs, evaluate_ensembles
from llmscreen.evaluation import compute_metrics, tabulate_confusion
from llmscreen.protocol import BiasLevel
from llmscreen.reference import column_from_counts, subset_fixture

records = subset_fixture()
truth = {r.record_id: r.ground_truth for r in records}

# counts chosen so each column prints like a row of the subset results
columns = {
    ScreeningSource.model("gpt-3.5", BiasLevel.HEAVY): column_from_counts(records, 271, 321),
    ScreeningSource.model("gpt-4o", BiasLevel.HEAVY): column_from_counts(records, 247, 55),
    ScreeningSource.human("Bravo"): column_from_counts(records, 195, 19),
}

store = DecisionStore()
for source, col in columns.items():
    for rid, verdict in col.items():
        store.append(ScreeningDecision(rid, source, verdict))
    m = compute_metrics(tabulate_confusion(col, truth)).rounded()
    print(f"{source.display_name:16s} sens={m['sensitivity']:.3f} spec={m['specificity']:.3f} prec={m['precision']:.3f}")

print()
for res in evaluate_ensembles(store, truth, all_pairs(list(columns))):
    d = res.as_dict()
    print(f"{d['mode']:8s} {d['component_a']:16s} + {d['component_b']:16s} "
          f"sens={d['sensitivity']:.3f} prec={d['precision']:.3f} ({d['config_class']})")
