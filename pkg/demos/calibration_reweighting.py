"""
Binning calibration under label shift
=====================================

Fisher's LDA on a binary problem, recalibrated by uniform-mass binning on
balanced source data, then evaluated on a target where the positive class
makes up 80% of the population.
"""

import numpy as np

from lsuq import (RngStream, bin_frequencies_from_probs, epsilon_bounds, estimate_weights,
                  fit_binning, reliability_from_probs, reweight_bins, weights_from_priors)
from lsuq.sim import fisher_lda_fit, sample_mixture, scenario_spec

source = scenario_spec("binary")
target = source.with_priors((0.2, 0.8))
root = RngStream(7)

f = fisher_lda_fit(sample_mixture(source, 1000, root.child(0)))
cal = sample_mixture(source, 2000, root.child(1))
test = sample_mixture(target, 5000, root.child(2))
P_cal, P_test = f(cal.features), f(test.features)

scheme = fit_binning(P_cal, bin_count=10)
calib = bin_frequencies_from_probs(P_cal, cal.labels, scheme)
print("bin edges:", np.round(scheme.edges, 3))
print("counts:   ", calib.counts)

# per-bin confidence radii hold simultaneously over all bins with prob 0.9
eps = epsilon_bounds(calib, alpha=0.1)
print(f"epsilon per bin: {eps[0]:.3f} (all bins hold {calib.counts[0]} points)")

# reweight the bin frequencies with true and estimated weights
est_s = sample_mixture(source, 2000, root.child(3))
est_t = sample_mixture(target, 2000, root.child(4))
w_hat = estimate_weights(f(est_s.features), est_s.labels, f(est_t.features)).weights
w_true = weights_from_priors((0.5, 0.5), (0.2, 0.8))

raw = reliability_from_probs(calib, P_test, test.labels)
print(f"\nuncorrected ECE on target: {raw.ece:.4f}")
for name, w in [("true", w_true), ("BBSE", w_hat)]:
    rep = reliability_from_probs(reweight_bins(calib, w), P_test, test.labels, use_reweighted=True)
    print(f"reweighted ({name:>4}) ECE:    {rep.ece:.4f}   weights {np.round(w, 3)}")

print("\nreliability, BBSE-reweighted:")
print(f"{'bin':>4}{'range':>18}{'predicted':>11}{'observed':>10}{'n':>6}")
for b in reliability_from_probs(reweight_bins(calib, w_hat), P_test, test.labels, True).bins:
    print(f"{b.bin_index:>4}   [{b.lower_edge:.3f}, {b.upper_edge:.3f}){b.predicted:>11.3f}"
          f"{b.observed:>10.3f}{b.count:>6}")
