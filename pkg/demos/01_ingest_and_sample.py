"""Parse a RIS export, clean it, then draw a balanced subset."""

from llmscreen.corpus import SubsetSpec, build_balanced_subset, group_by_review, ingest
from llmscreen.reference import REVIEWS, synthetic_records

ris = b"""TY  - JOUR
TI  - Statins after carotid endarterectomy
AB  - A randomised trial of statins.
PY  - 2019
ER  - 

TY  - JOUR
TI  - Statins after Carotid Endarterectomy.
AB  - Same study, exported twice.
PY  - 2019
ER  - 

TY  - JOUR
TI  - Antiplatelet therapy for stenosis
PY  - 2021
ER  - 
"""

result = ingest([("search.ris", ris)], "clezar", search_year=2022,
                inclusion_list=[("Statins after carotid endarterectomy", 2019)])
for rec in result.records:
    print(f"{rec.record_id}  {rec.ground_truth.value:20s} dropped={rec.drop_reason and rec.drop_reason.value}")

# the second record is a duplicate (same normalised title and year),
# the third has no abstract; only the first survives
print("kept:", [r.title for r in result.kept])

# a synthetic corpus shaped like the 23 reviews, 40 excludes each
corpus = synthetic_records({a: n for a, (_, n) in REVIEWS.items()}, 40)
subset = build_balanced_subset(group_by_review(corpus), SubsetSpec(seed=0))
positives = sum(r.ground_truth.value == "IncludedInReview" for r in subset)
print(f"subset: {len(subset)} records, {positives} positives, {len(subset) - positives} negatives")
