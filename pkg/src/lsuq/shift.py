"""Label-shift estimation (black-box shift estimation) and posterior correction."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    SIMPLEX_TOL,
    Dataset,
    LabelShiftError,
    make_prob_vector,
    make_weight_vector,
    predict_proba,
)

SINGULAR_COND = 1e12


class EmptySourceError(LabelShiftError):
    pass


class EmptyTargetError(LabelShiftError):
    pass


class SingularMatrixError(LabelShiftError):
    pass


class ZeroDenominatorError(LabelShiftError):
    pass


def _hard(P: np.ndarray) -> np.ndarray:
    return np.eye(P.shape[1])[np.argmax(P, axis=1)]


def confusion_from_probs(P: np.ndarray, labels: np.ndarray, soft: bool = True) -> np.ndarray:
    """Joint frequency matrix, rows = predicted class, columns = true class."""
    P = np.asarray(P, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptySourceError("confusion matrix of an empty source sample")
    K = P.shape[1]
    pred = P if soft else _hard(P)
    onehot = np.eye(K)[labels]
    return pred.T @ onehot / labels.size


def confusion_matrix(source: Dataset, predictor, soft: bool = True) -> np.ndarray:
    """Empirical confusion matrix of ``predictor`` on labelled source data.

    The hard version counts argmax predictions; the soft version averages the
    predicted probability vectors instead.
    """
    if len(source) == 0:
        raise EmptySourceError("confusion matrix of an empty source sample")
    return confusion_from_probs(predict_proba(predictor, source.features), source.labels, soft)


def target_marginal_from_probs(P: np.ndarray, soft: bool = True) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.shape[0] == 0:
        raise EmptyTargetError("target marginal of an empty sample")
    return make_prob_vector((P if soft else _hard(P)).mean(axis=0))


def target_marginal(target_features: np.ndarray, predictor, soft: bool = True) -> np.ndarray:
    """Mean prediction (soft) or argmax frequencies (hard) on unlabelled target data."""
    X = np.asarray(target_features, dtype=float)
    if X.shape[0] == 0:
        raise EmptyTargetError("target marginal of an empty sample")
    return target_marginal_from_probs(predict_proba(predictor, X), soft)


class BBSEResult(NamedTuple):
    weights: np.ndarray
    raw: np.ndarray
    condition: float

    @property
    def clipped(self) -> np.ndarray:
        return np.flatnonzero(self.raw != self.weights)


def solve_bbse(conf: np.ndarray, mu: Sequence[float], clip_floor: float = 0.0) -> BBSEResult:
    """Solve ``conf @ w = mu`` and clip the solution from below at ``clip_floor``.

    Returns the clipped weights, the unclipped solution and the 1-norm
    condition number of ``conf``.
    """
    C = np.asarray(conf, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] != mu.size:
        raise LabelShiftError(f"confusion matrix {C.shape} and marginal {mu.shape} are incompatible")
    if np.any(C < 0) or abs(C.sum() - 1.0) > SIMPLEX_TOL:
        raise LabelShiftError("confusion matrix must be nonnegative and sum to 1")
    if clip_floor < 0:
        raise LabelShiftError("clip_floor must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = float(np.linalg.cond(C, 1))
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        raise SingularMatrixError(f"confusion matrix is singular (condition estimate {cond:.3g})")
    raw = np.linalg.solve(C, mu)
    return BBSEResult(make_weight_vector(np.maximum(raw, clip_floor)), raw, cond)


def bbse(conf: np.ndarray, mu: Sequence[float], clip_floor: float = 0.0) -> np.ndarray:
    """Black-box shift estimate of the importance weights ``q(y) / p(y)``.

    No renormalization is applied after clipping; the weights are ratios.
    """
    return solve_bbse(conf, mu, clip_floor).weights


def estimate_weights(source_probs: np.ndarray, source_labels: np.ndarray,
                     target_probs: np.ndarray, soft: bool = True,
                     clip_floor: float = 0.0) -> BBSEResult:
    """BBSE from precomputed source/target predictions."""
    C = confusion_from_probs(source_probs, source_labels, soft)
    mu = target_marginal_from_probs(target_probs, soft)
    return solve_bbse(C, mu, clip_floor)


def saerens_adjust_matrix(P: np.ndarray, w: Sequence[float]) -> np.ndarray:
    """Row-wise ``w * p / sum(w * p)``."""
    P = np.asarray(P, dtype=float)
    w = np.asarray(w, dtype=float)
    num = P * w[None, :]
    den = num.sum(axis=1, keepdims=True)
    if np.any(den <= 0):
        raise ZeroDenominatorError("posterior puts all mass on zero-weight classes")
    return num / den


def saerens_adjust(probs: Sequence[float], w: Sequence[float]) -> np.ndarray:
    """Bayes-rule correction of a source posterior for a target with weights ``w``."""
    p = make_prob_vector(probs)
    w = make_weight_vector(w)
    if w.size != p.size:
        raise LabelShiftError("weight and probability vectors differ in length")
    return make_prob_vector(saerens_adjust_matrix(p[None, :], w)[0])
