"""Chance-corrected agreement between two screeners."""

import numpy as np

from llmscreen.evaluation import kappa_from_vectors, pearson_r
from llmscreen.protocol import Verdict

I, E = Verdict.INCLUDE, Verdict.EXCLUDE

rep = kappa_from_vectors([I, E, I, E], [I, E, E, E])
print(f"po={rep.observed_agreement:.2f} pe={rep.expected_agreement:.2f} kappa={rep.kappa:.2f}")

# a rerun that flips 5% of a model's decisions
rng = np.random.default_rng(1)
first = [I if x < 0.35 else E for x in rng.random(800)]
second = [(E if v is I else I) if rng.random() < 0.05 else v for v in first]
print(f"repeat-trial kappa: {kappa_from_vectors(first, second).kappa:.3f}")

# correlation between per-review sensitivity of two screeners
sens_a = rng.uniform(0.5, 1.0, 23)
sens_b = np.clip(sens_a + rng.normal(0, 0.1, 23), 0, 1)
print(f"per-review sensitivity r = {pearson_r(sens_a, sens_b):.3f}")
