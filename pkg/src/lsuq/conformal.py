"""Split-conformal thresholds and prediction sets.

Three calibration routes share one primitive, the left-continuous quantile
``Q_beta(F) = inf{z : F(z) >= beta}`` of a weighted empirical distribution
that always carries an extra atom at 1:

* standard: equal masses on the calibration scores;
* weighted: masses ``w(Y_i)`` on the scores and ``w(y)`` on the atom at 1,
  giving one threshold per candidate class ``y``;
* label-conditional: a separate standard quantile within each class.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .core import (
    SIMPLEX_TOL,
    Dataset,
    LabelShiftError,
    RngStream,
    check_alpha,
    make_prob_vector,
    make_weight_vector,
    predict_proba,
)
from .scores import ScoreScheme, ScoreSet, draw_u, score_matrix

# Relative slack when comparing cumulative mass with the target level; absorbs
# summation round-off so that e.g. 9 masses of 1/10 reach level 0.9.
QUANTILE_RTOL = 1e-12


class EmptyDistributionError(LabelShiftError):
    pass


class NoScoresError(LabelShiftError):
    pass


class ZeroTotalWeightError(LabelShiftError):
    pass


class EmptyClassWarning(UserWarning):
    pass


@dataclass(frozen=True)
class WeightedEmpirical:
    """Finitely supported distribution ``sum_i masses[i] * delta(values[i])``."""

    values: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        m = np.asarray(self.masses, dtype=float).reshape(-1)
        if v.shape != m.shape:
            raise LabelShiftError("values and masses must have equal length")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise LabelShiftError("masses must be finite and nonnegative")
        if m.size and abs(m.sum() - 1.0) > SIMPLEX_TOL:
            raise LabelShiftError(f"masses sum to {m.sum()!r}, not 1")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "masses", m)

    @classmethod
    def from_weights(cls, values, weights) -> "WeightedEmpirical":
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if total <= 0:
            raise ZeroTotalWeightError("weights sum to zero")
        return cls(values, w / total)

    def merged(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted distinct atoms with their pooled masses."""
        uniq, inv = np.unique(self.values, return_inverse=True)
        return uniq, np.bincount(inv, weights=self.masses, minlength=uniq.size)


def _first_reaching(cum: np.ndarray, level: float) -> int:
    """Index of the first cumulative value ``>= level`` (``len(cum)`` if none)."""
    slack = QUANTILE_RTOL * (cum[-1] if cum.size else 0.0)
    return int(np.searchsorted(cum, level - slack, side="left"))


def weighted_quantile(dist: WeightedEmpirical, beta: float) -> float:
    """Smallest atom ``z`` with ``F(z) >= beta``."""
    if not 0.0 < beta <= 1.0:
        raise LabelShiftError(f"beta must lie in (0, 1], got {beta!r}")
    if dist.values.size == 0:
        raise EmptyDistributionError("quantile of an empty distribution")
    values, masses = dist.merged()
    cum = np.cumsum(masses)
    i = _first_reaching(cum, beta * cum[-1])
    return float(values[min(i, values.size - 1)])


class Mode(enum.Enum):
    STANDARD = "standard"
    WEIGHTED = "weighted"
    LABEL_CONDITIONAL = "label-conditional"


@dataclass(frozen=True)
class ConformalModel:
    mode: Mode
    thresholds: np.ndarray
    scheme: ScoreScheme
    alpha: float | np.ndarray
    force_top_label: bool = False
    excluded: tuple[int, ...] = field(default=())

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=float)
        if np.any((t < 0) | (t > 1)):
            raise LabelShiftError("thresholds must lie in [0, 1]")
        if self.mode is not Mode.STANDARD and t.ndim != 1:
            raise LabelShiftError(f"{self.mode.value} mode needs per-class thresholds")
        t.setflags(write=False)
        object.__setattr__(self, "thresholds", t)

    @property
    def class_count(self) -> int | None:
        return None if self.thresholds.ndim == 0 else int(self.thresholds.size)

    def threshold_vector(self, K: int) -> np.ndarray:
        if self.thresholds.ndim == 0:
            return np.full(K, float(self.thresholds))
        if self.thresholds.size != K:
            raise LabelShiftError(f"model has {self.thresholds.size} thresholds, predictions have K={K}")
        return np.asarray(self.thresholds)

    def forcing_top(self, flag: bool = True) -> "ConformalModel":
        return replace(self, force_top_label=flag)


def _as_scores(scores) -> ScoreSet:
    s = ScoreSet.from_records(scores)
    if len(s) == 0:
        raise NoScoresError("no calibration scores")
    return s


def _sorted_quantiles(values: np.ndarray, weights: np.ndarray, extra: np.ndarray,
                      beta: float) -> np.ndarray:
    """Quantiles of ``sum_i weights_i delta(values_i) + extra_k delta(1)`` for each ``extra_k``.

    ``values`` must be sorted ascending; the atom at 1 sorts last.
    """
    cum = np.cumsum(weights)
    total = (cum[-1] if cum.size else 0.0) + extra
    if np.any(total <= 0):
        raise ZeroTotalWeightError("total calibration weight is zero")
    out = np.ones(extra.shape)
    for k, tot in enumerate(total):
        i = int(np.searchsorted(cum, beta * tot - QUANTILE_RTOL * tot, side="left"))
        if i < values.size:
            out[k] = values[i]
    return out


def calibrate_standard(scores, alpha: float, scheme=ScoreScheme.RANDOMIZED,
                       force_top_label: bool = False) -> ConformalModel:
    """Threshold ``Q_{1-alpha}`` of the scores plus an atom at 1, all with mass ``1/(n+1)``."""
    alpha = check_alpha(alpha)
    s = _as_scores(scores)
    order = np.argsort(s.scores, kind="stable")
    tau = _sorted_quantiles(s.scores[order], np.ones(len(s)), np.ones(1), 1.0 - alpha)[0]
    return ConformalModel(Mode.STANDARD, np.float64(tau), ScoreScheme.parse(scheme), alpha,
                          force_top_label)


def calibrate_weighted(scores, w: Sequence[float], alpha: float, scheme=ScoreScheme.RANDOMIZED,
                       force_top_label: bool = False) -> ConformalModel:
    """Per-class thresholds from label-shift importance weights.

    For candidate class ``y`` the score ``r_i`` gets mass proportional to
    ``w(Y_i)`` and the atom at 1 gets mass proportional to ``w(y)``.
    """
    alpha = check_alpha(alpha)
    s = _as_scores(scores)
    w = make_weight_vector(w)
    if s.labels.max() >= w.size:
        raise LabelShiftError(f"score labels exceed weight vector length {w.size}")
    order = np.argsort(s.scores, kind="stable")
    tau = _sorted_quantiles(s.scores[order], w[s.labels[order]], np.asarray(w), 1.0 - alpha)
    excluded = tuple(int(k) for k in np.flatnonzero(w == 0))
    if excluded:
        warnings.warn(f"classes {excluded} have zero weight and are excluded from prediction sets",
                      stacklevel=2)
    return ConformalModel(Mode.WEIGHTED, tau, ScoreScheme.parse(scheme), alpha,
                          force_top_label, excluded)


def calibrate_label_conditional(scores, alphas: float | Sequence[float] | Mapping[int, float],
                                class_count: int | None = None, scheme=ScoreScheme.RANDOMIZED,
                                force_top_label: bool = False) -> ConformalModel:
    """One standard split-conformal threshold per class, at level ``1 - alphas[y]``.

    A class without calibration scores gets threshold 1 and an
    :class:`EmptyClassWarning`.
    """
    s = ScoreSet.from_records(scores)
    if isinstance(alphas, Mapping):
        K = class_count if class_count is not None else max(alphas) + 1
        a = np.array([alphas[k] for k in range(K)], dtype=float)
    elif np.ndim(alphas) == 0:
        if class_count is None:
            raise LabelShiftError("class_count is required with a scalar alpha")
        K = int(class_count)
        a = np.full(K, float(alphas))
    else:
        a = np.asarray(alphas, dtype=float)
        K = a.size
    for ay in a:
        check_alpha(ay)
    if len(s) and s.labels.max() >= K:
        raise LabelShiftError(f"score labels exceed class count {K}")
    tau = np.ones(K)
    empty = []
    for y in range(K):
        r = np.sort(s.scores[s.labels == y])
        if r.size == 0:
            empty.append(y)
            continue
        tau[y] = _sorted_quantiles(r, np.ones(r.size), np.ones(1), 1.0 - a[y])[0]
    if empty:
        warnings.warn(f"classes {tuple(empty)} have no calibration scores; threshold set to 1",
                      EmptyClassWarning, stacklevel=2)
    alpha = float(a[0]) if np.all(a == a[0]) else a
    return ConformalModel(Mode.LABEL_CONDITIONAL, tau, ScoreScheme.parse(scheme), alpha,
                          force_top_label)


def predict_sets(model: ConformalModel, P: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Boolean membership mask ``(n, K)``; ``u`` holds one draw per row."""
    P = np.asarray(P, dtype=float)
    K = P.shape[1]
    member = score_matrix(P, u, model.scheme) <= model.threshold_vector(K)[None, :]
    if model.excluded:
        member[:, list(model.excluded)] = False
    if model.force_top_label and P.shape[0]:
        member[np.arange(P.shape[0]), np.argmax(P, axis=1)] = True
    return member


def predict_set(model: ConformalModel, probs: Sequence[float], u: float) -> set[int]:
    p = make_prob_vector(probs)
    mask = predict_sets(model, p[None, :], np.array([u]))[0]
    return {int(y) for y in np.flatnonzero(mask)}


@dataclass(frozen=True)
class Evaluation:
    coverage: float
    mean_size: float
    per_class_coverage: np.ndarray
    thresholds: np.ndarray


def evaluate_probs(model: ConformalModel, P: np.ndarray, labels: np.ndarray,
                   u: np.ndarray) -> Evaluation:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise LabelShiftError("empty test set")
    member = predict_sets(model, P, u)
    covered = member[np.arange(labels.size), labels]
    K = member.shape[1]
    counts = np.bincount(labels, minlength=K)
    hits = np.bincount(labels, weights=covered, minlength=K)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    return Evaluation(float(covered.mean()), float(member.sum(axis=1).mean()), per_class,
                      model.threshold_vector(K).copy())


def evaluate(model: ConformalModel, test: Dataset, predictor, rng: RngStream) -> Evaluation:
    """Coverage, mean set size and per-class coverage on labelled test data."""
    if len(test) == 0:
        raise LabelShiftError("empty test set")
    P = predict_proba(predictor, test.features)
    return evaluate_probs(model, P, test.labels, draw_u(len(test), model.scheme, rng))
