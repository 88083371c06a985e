"""
Prediction sets when the class balance moves
============================================

Three Gaussian classes, a Bayes-optimal classifier trained on the source
balance, and a test population whose class proportions differ.
"""

import numpy as np

from lsuq import (RngStream, ScoreScheme, calibrate_label_conditional, calibrate_standard,
                  calibrate_weighted, evaluate_probs, estimate_weights, weights_from_priors)
from lsuq.scores import draw_u, scores_from_probs
from lsuq.sim import MixturePosterior, sample_mixture, scenario_spec

p = (0.1, 0.6, 0.3)
q = (0.3, 0.2, 0.5)
source = scenario_spec("toy3class", p)
target = source.with_priors(q)
f = MixturePosterior(source)
scheme = ScoreScheme.RANDOMIZED
root = RngStream(2024)

# calibration data come from the source, test data from the target
cal = sample_mixture(source, 1000, root.child(0))
test = sample_mixture(target, 5000, root.child(1))
scores = scores_from_probs(f(cal.features), cal.labels, scheme, draw_u(len(cal), scheme, root.child(2)))
P_test = f(test.features)
u_test = draw_u(len(test), scheme, root.child(3))

# weights from the true priors, and an estimate from unlabelled target data
w_true = weights_from_priors(p, q)
est_s = sample_mixture(source, 4000, root.child(4))
est_t = sample_mixture(target, 4000, root.child(5))
w_hat = estimate_weights(f(est_s.features), est_s.labels, f(est_t.features)).weights
print("true weights     ", np.round(w_true, 3))
print("estimated weights", np.round(w_hat, 3))

models = {
    "standard": calibrate_standard(scores, 0.1),
    "weighted, true w": calibrate_weighted(scores, w_true, 0.1),
    "weighted, BBSE w": calibrate_weighted(scores, w_hat, 0.1),
    "label-conditional": calibrate_label_conditional(scores, 0.1, class_count=3),
}

print(f"\n{'method':<20}{'coverage':>10}{'size':>8}   per-class coverage")
for name, model in models.items():
    ev = evaluate_probs(model, P_test, test.labels, u_test)
    print(f"{name:<20}{ev.coverage:>10.3f}{ev.mean_size:>8.2f}   {np.round(ev.per_class_coverage, 3)}")

# the weighted thresholds differ by candidate class: rare-in-source classes
# that became common get a larger threshold
print("\nweighted thresholds:", np.round(models["weighted, true w"].thresholds, 3))
