"""Post-hoc calibration by binning, with label-shift reweighting of the bins.

The predictor output is projected to a scalar (probability of a designated
positive class for K=2, top-class probability otherwise) and binned; a
product grid over the first K-1 coordinates is available for small K.
Bins are half-open ``[e_j, e_{j+1})`` except the last, which is closed at 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import (
    Dataset,
    LabelShiftError,
    condition_number,
    make_prob_vector,
    make_weight_vector,
    min_nonzero,
    predict_proba,
    validate_prob_matrix,
)
from .shift import ZeroDenominatorError

UNIFORM_MASS = "uniform-mass"
FIXED_WIDTH = "fixed-width"
PROJECTIONS = ("positive", "top", "grid")
GRID_MAX_CLASSES = 4


class TooFewPointsError(LabelShiftError):
    pass


class DegenerateOutputsError(LabelShiftError):
    pass


class EmptyBinError(LabelShiftError):
    pass


class BadInputsError(LabelShiftError):
    pass


@dataclass(frozen=True)
class BinningScheme:
    mode: str
    bin_count: int
    projection: str
    edges: np.ndarray
    class_count: int
    positive_class: int = 1

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.size != self.bin_count + 1 or np.any(np.diff(e) <= 0):
            raise DegenerateOutputsError("bin edges must be strictly increasing")
        if e[0] != 0.0 or e[-1] != 1.0:
            raise LabelShiftError("bin edges must span [0, 1]")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @property
    def n_bins(self) -> int:
        if self.projection == "grid":
            return self.bin_count ** (self.class_count - 1)
        return self.bin_count

    def project(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=float)
        if self.projection == "positive":
            return P[:, self.positive_class]
        if self.projection == "top":
            return P.max(axis=1)
        return P[:, :-1]

    def _cells(self, v: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.edges, v, side="right") - 1
        return np.clip(idx, 0, self.bin_count - 1)

    def assign(self, P: np.ndarray) -> np.ndarray:
        """Bin index of every row of an ``(n, K)`` prediction array."""
        P = np.asarray(P, dtype=float)
        if P.shape[1] != self.class_count:
            raise LabelShiftError(f"scheme was fit for K={self.class_count}, got K={P.shape[1]}")
        cells = self._cells(self.project(P))
        if self.projection != "grid":
            return cells
        radix = self.bin_count ** np.arange(self.class_count - 1)
        return cells @ radix

    def bin_range(self, m: int) -> tuple[float, float]:
        """Projected-value interval of bin ``m`` (first grid axis for the grid projection)."""
        j = m % self.bin_count
        return float(self.edges[j]), float(self.edges[j + 1])

    def target_class(self, freq: np.ndarray) -> int:
        """Class whose probability a bin reports in reliability diagrams."""
        if self.projection == "positive":
            return self.positive_class
        return int(np.argmax(freq))


def fit_binning(cal_outputs: np.ndarray, bin_count: int = 10, mode: str = UNIFORM_MASS,
                projection: str | None = None, positive_class: int = 1) -> BinningScheme:
    """Fit bin edges on calibration predictions.

    Uniform-mass interior edges sit between consecutive order statistics at
    ranks ``floor(j n / M)`` so bin counts differ by at most one (for
    distinct projected values); fixed-width edges are ``j / M``.
    """
    P = validate_prob_matrix(cal_outputs)
    n, K = P.shape
    M = int(bin_count)
    if M < 1:
        raise BadInputsError("bin_count must be positive")
    if projection is None:
        projection = "positive" if K == 2 else "top"
    if projection not in PROJECTIONS:
        raise BadInputsError(f"unknown projection {projection!r}")
    if projection == "positive" and not 0 <= positive_class < K:
        raise BadInputsError(f"positive_class {positive_class} outside 0..{K - 1}")
    if projection == "grid":
        if mode != FIXED_WIDTH:
            raise BadInputsError("the grid projection supports fixed-width bins only")
        if K > GRID_MAX_CLASSES:
            raise BadInputsError(f"grid binning is limited to K <= {GRID_MAX_CLASSES}")
    if mode == FIXED_WIDTH:
        edges = np.linspace(0.0, 1.0, M + 1)
    elif mode == UNIFORM_MASS:
        if n < M:
            raise TooFewPointsError(f"{n} calibration points for {M} uniform-mass bins")
        v = np.sort(P[:, positive_class] if projection == "positive" else P.max(axis=1))
        if np.unique(v).size < M:
            raise DegenerateOutputsError(f"fewer than {M} distinct projected outputs")
        ranks = (np.arange(1, M) * n) // M
        inner = 0.5 * (v[ranks - 1] + v[ranks])
        edges = np.concatenate([[0.0], inner, [1.0]])
        if np.any(np.diff(edges) <= 0):
            raise DegenerateOutputsError("uniform-mass edges collide; outputs too concentrated")
    else:
        raise BadInputsError(f"unknown binning mode {mode!r}")
    return BinningScheme(mode, M, projection, edges, K, positive_class)


@dataclass(frozen=True)
class BinnedCalibrator:
    """Per-bin label frequencies; rows of empty bins are NaN."""

    scheme: BinningScheme
    source_freqs: np.ndarray
    counts: np.ndarray
    reweighted_freqs: np.ndarray | None = None
    weights: np.ndarray | None = field(default=None)

    def freqs(self, use_reweighted: bool = False) -> np.ndarray:
        if not use_reweighted:
            return self.source_freqs
        if self.reweighted_freqs is None:
            raise LabelShiftError("calibrator has not been reweighted")
        return self.reweighted_freqs

    def to_dict(self) -> dict:
        def rows(F):
            return None if F is None else [None if np.isnan(r[0]) else r.tolist() for r in F]

        return {
            "mode": self.scheme.mode,
            "bin_count": self.scheme.bin_count,
            "projection": self.scheme.projection,
            "positive_class": self.scheme.positive_class,
            "class_count": self.scheme.class_count,
            "edges": self.scheme.edges.tolist(),
            "counts": self.counts.tolist(),
            "source_freqs": rows(self.source_freqs),
            "reweighted_freqs": rows(self.reweighted_freqs),
            "weights": None if self.weights is None else list(map(float, self.weights)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinnedCalibrator":
        K = int(d["class_count"])

        def arr(rows):
            if rows is None:
                return None
            return np.array([[np.nan] * K if r is None else r for r in rows], dtype=float)

        scheme = BinningScheme(d["mode"], int(d["bin_count"]), d["projection"],
                               np.array(d["edges"], dtype=float), K, int(d["positive_class"]))
        w = d.get("weights")
        return cls(scheme, arr(d["source_freqs"]), np.array(d["counts"], dtype=np.int64),
                   arr(d.get("reweighted_freqs")), None if w is None else np.array(w, dtype=float))


def bin_frequencies_from_probs(P: np.ndarray, labels: np.ndarray,
                               scheme: BinningScheme) -> BinnedCalibrator:
    labels = np.asarray(labels, dtype=np.int64)
    K = scheme.class_count
    bins = scheme.assign(P)
    B = scheme.n_bins
    joint = np.zeros((B, K))
    np.add.at(joint, (bins, labels), 1.0)
    counts = joint.sum(axis=1).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        freqs = joint / counts[:, None]
    freqs[counts == 0] = np.nan
    return BinnedCalibrator(scheme, freqs, counts)


def bin_frequencies(cal: Dataset, predictor, scheme: BinningScheme) -> BinnedCalibrator:
    """Empirical class frequencies within each bin of the calibration data."""
    P = predict_proba(predictor, cal.features) if len(cal) else np.empty((0, scheme.class_count))
    return bin_frequencies_from_probs(P, cal.labels, scheme)


def reweight_bins(cal: BinnedCalibrator, w: Sequence[float]) -> BinnedCalibrator:
    """Reweight every nonempty bin's frequencies by ``w`` and renormalize."""
    w = make_weight_vector(w)
    if w.size != cal.scheme.class_count:
        raise LabelShiftError("weight vector length differs from class count")
    F = cal.source_freqs
    filled = cal.counts > 0
    num = F[filled] * w[None, :]
    den = num.sum(axis=1, keepdims=True)
    if np.any(den <= 0):
        raise ZeroDenominatorError("a bin has all its mass on zero-weight classes")
    R = np.full_like(F, np.nan)
    R[filled] = num / den
    return replace(cal, reweighted_freqs=R, weights=np.array(w))


def recalibrate_matrix(calibrator: BinnedCalibrator, P: np.ndarray,
                       use_reweighted: bool = False) -> np.ndarray:
    bins = calibrator.scheme.assign(P)
    if np.any(calibrator.counts[bins] == 0):
        raise EmptyBinError("prediction falls in a bin without calibration data")
    return calibrator.freqs(use_reweighted)[bins]


def recalibrate(calibrator: BinnedCalibrator, probs: Sequence[float],
                use_reweighted: bool = False) -> np.ndarray:
    """Stored frequency vector of the bin that ``probs`` falls into."""
    p = make_prob_vector(probs)
    return make_prob_vector(recalibrate_matrix(calibrator, p[None, :], use_reweighted)[0])


def epsilon_bound(N_m: int, M: float, K: float, alpha: float) -> float:
    """Finite-sample L1 radius for a bin holding ``N_m`` points.

    Holds simultaneously over ``M`` bins with probability ``1 - alpha``:
    ``2 / sqrt(N_m) * sqrt(log(M * 2**K / alpha) / 2)``.
    """
    if not N_m >= 1 or not 0.0 < alpha < 1.0 or not M > 0 or not K >= 0:
        raise BadInputsError(f"bad inputs N_m={N_m!r}, M={M!r}, K={K!r}, alpha={alpha!r}")
    log_arg = math.log(M) + K * math.log(2.0) - math.log(alpha)
    if log_arg < 0:
        raise BadInputsError("M * 2**K must be at least alpha")
    return 2.0 / math.sqrt(N_m) * math.sqrt(0.5 * log_arg)


def epsilon_bounds(calibrator: BinnedCalibrator, alpha: float) -> np.ndarray:
    """Per-bin radii (NaN for empty bins), using the scheme's total bin count as M."""
    M = calibrator.scheme.n_bins
    K = calibrator.scheme.class_count
    return np.array([epsilon_bound(int(N), M, K, alpha) if N > 0 else np.nan
                     for N in calibrator.counts])


def target_miscalibration_bound(source_l1_error: float, w_hat: Sequence[float],
                                w_true: Sequence[float]) -> float:
    """Upper bound on a reweighted bin's L1 error on the target.

    ``2 * kappa * source_l1_error + 2 * ||w_hat - w||_inf / min_{w != 0} w``,
    where ``kappa`` is the condition number of the true weights.
    """
    w = make_weight_vector(w_true)
    wh = np.asarray(w_hat, dtype=float)
    if wh.shape != w.shape:
        raise LabelShiftError("weight vectors differ in length")
    kappa = condition_number(w)
    return 2.0 * kappa * float(source_l1_error) + 2.0 * float(np.max(np.abs(wh - w))) / min_nonzero(w)


@dataclass(frozen=True)
class ReliabilityBin:
    bin_index: int
    lower_edge: float
    upper_edge: float
    predicted: float
    observed: float
    count: int


@dataclass(frozen=True)
class ReliabilityReport:
    bins: list[ReliabilityBin]
    ece: float
    max_l1: float


def reliability_from_probs(calibrator: BinnedCalibrator, P: np.ndarray, labels: np.ndarray,
                           use_reweighted: bool = False) -> ReliabilityReport:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise LabelShiftError("reliability curve needs test data")
    scheme = calibrator.scheme
    K = scheme.class_count
    F = calibrator.freqs(use_reweighted)
    bins = scheme.assign(P)
    joint = np.zeros((scheme.n_bins, K))
    np.add.at(joint, (bins, labels), 1.0)
    test_counts = joint.sum(axis=1)
    records = []
    gaps, masses, l1 = [], [], []
    for m in range(scheme.n_bins):
        n_m = int(test_counts[m])
        lo, hi = scheme.bin_range(m)
        if calibrator.counts[m] == 0:
            if n_m:
                records.append(ReliabilityBin(m, lo, hi, np.nan, np.nan, n_m))
            continue
        c = scheme.target_class(F[m])
        predicted = float(F[m, c])
        observed = float(joint[m, c] / n_m) if n_m else np.nan
        records.append(ReliabilityBin(m, lo, hi, predicted, observed, n_m))
        if n_m:
            gaps.append(abs(predicted - observed))
            masses.append(n_m)
            l1.append(float(np.abs(F[m] - joint[m] / n_m).sum()))
    masses = np.asarray(masses, dtype=float)
    ece = float(np.dot(masses, gaps) / masses.sum()) if masses.size else np.nan
    return ReliabilityReport(records, ece, max(l1) if l1 else np.nan)


def reliability_curve(calibrator: BinnedCalibrator, test: Dataset, predictor,
                      use_reweighted: bool = False) -> ReliabilityReport:
    """Per-bin predicted vs. observed frequencies on test data, with ECE.

    Bins empty on the test side are listed with count 0 and left out of the
    ECE and of the maximal per-bin L1 deviation.
    """
    return reliability_from_probs(calibrator, predict_proba(predictor, test.features),
                                  test.labels, use_reweighted)
