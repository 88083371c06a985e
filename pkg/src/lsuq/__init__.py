"""Distribution-free uncertainty quantification for classification under label shift."""

__version__ = "0.1.0"

from .core import (
    Dataset,
    LabeledSample,
    LabelShiftError,
    RngStream,
    condition_number,
    make_prob_vector,
    make_weight_vector,
    uniform_draw,
    weights_from_priors,
)
from .scores import ScoreScheme, oracle_set, oracle_set_tie_broken, rho, score, score_calibration_set
from .conformal import (
    ConformalModel,
    Mode,
    WeightedEmpirical,
    calibrate_label_conditional,
    calibrate_standard,
    calibrate_weighted,
    evaluate,
    evaluate_probs,
    predict_set,
    predict_sets,
    weighted_quantile,
)
from .shift import (
    bbse,
    confusion_from_probs,
    confusion_matrix,
    estimate_weights,
    saerens_adjust,
    solve_bbse,
    target_marginal,
)
from .calibration import (
    bin_frequencies,
    bin_frequencies_from_probs,
    epsilon_bound,
    epsilon_bounds,
    fit_binning,
    recalibrate,
    reliability_curve,
    reliability_from_probs,
    reweight_bins,
    target_miscalibration_bound,
)
from .sim import (
    ExperimentConfig,
    GaussianMixtureSpec,
    bayes_posterior,
    fisher_lda_fit,
    resample_label_shift,
    run_experiment,
    sample_mixture,
    split_dataset,
    summarize,
)
