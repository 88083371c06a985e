"""
Estimating label-shift weights from a confusion matrix
======================================================

The soft confusion matrix on labelled source data and the mean prediction
on unlabelled target data are linked by mu = C w. Solving for w gives the
class-ratio estimate; the error shrinks as both samples grow.
"""

import numpy as np

from lsuq import RngStream, confusion_from_probs, solve_bbse, weights_from_priors
from lsuq.shift import target_marginal_from_probs
from lsuq.sim import MixturePosterior, sample_mixture, scenario_spec

p, q = (0.1, 0.6, 0.3), (0.3, 0.2, 0.5)
source = scenario_spec("toy3class", p)
target = source.with_priors(q)
f = MixturePosterior(source)
w = weights_from_priors(p, q)

s = sample_mixture(source, 4000, RngStream(3, 0))
t = sample_mixture(target, 4000, RngStream(3, 1))
C = confusion_from_probs(f(s.features), s.labels, soft=True)
mu = target_marginal_from_probs(f(t.features), soft=True)
print("soft confusion matrix (rows predicted, columns true):")
print(np.round(C, 4))
print("target mean prediction:", np.round(mu, 4))

res = solve_bbse(C, mu)
print("estimate:", np.round(res.weights, 3), " truth:", np.round(w, 3),
      f" condition {res.condition:.1f}")

print("\nsup-norm error vs. sample size (median of 50 draws)")
for k in (500, 2000, 8000, 32000):
    errs = []
    for r in range(50):
        s = sample_mixture(source, k, RngStream(4, (k, r, 0)))
        t = sample_mixture(target, k, RngStream(4, (k, r, 1)))
        C = confusion_from_probs(f(s.features), s.labels)
        mu = target_marginal_from_probs(f(t.features))
        errs.append(np.max(np.abs(solve_bbse(C, mu).weights - w)))
    print(f"  k={k:>6}  {np.median(errs):.4f}")
