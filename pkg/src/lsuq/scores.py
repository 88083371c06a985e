"""Nonconformity scores built on the cumulative-mass function and oracle sets.

``rho(probs, y)`` is the total probability of labels strictly more likely
than ``y``. Scores add a randomization term ``u * probs[y]``; scheme 2 turns
the score of the most likely label into exactly zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .core import (
    BadLabelError,
    BadUError,
    Dataset,
    LabelShiftError,
    RngStream,
    check_alpha,
    make_prob_vector,
    predict_proba,
)


class ScoreScheme(enum.Enum):
    NON_RANDOMIZED = "nonrandomized"
    RANDOMIZED = "randomized"
    RANDOMIZED_EXCEPT_TOP = "randomized-except-top"

    @classmethod
    def parse(cls, value) -> "ScoreScheme":
        if isinstance(value, cls):
            return value
        aliases = {"0": cls.NON_RANDOMIZED, "1": cls.RANDOMIZED, "2": cls.RANDOMIZED_EXCEPT_TOP,
                   "scheme0": cls.NON_RANDOMIZED, "scheme1": cls.RANDOMIZED,
                   "scheme2": cls.RANDOMIZED_EXCEPT_TOP}
        key = str(value).strip().lower().replace("_", "-")
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise LabelShiftError(f"unknown score scheme {value!r}") from None

    @property
    def randomized(self) -> bool:
        return self is not ScoreScheme.NON_RANDOMIZED


class ScoreRecord(NamedTuple):
    score: float
    label: int
    u: float


@dataclass(frozen=True)
class ScoreSet:
    """Calibration scores stored column-wise; iterates as :class:`ScoreRecord`."""

    scores: np.ndarray
    labels: np.ndarray
    u: np.ndarray

    def __len__(self):
        return int(self.scores.shape[0])

    def __iter__(self) -> Iterator[ScoreRecord]:
        for s, y, u in zip(self.scores, self.labels, self.u):
            yield ScoreRecord(float(s), int(y), float(u))

    @classmethod
    def from_records(cls, records: Sequence[ScoreRecord]) -> "ScoreSet":
        if isinstance(records, cls):
            return records
        records = list(records)
        return cls(np.array([r.score for r in records], dtype=float),
                   np.array([r.label for r in records], dtype=np.int64),
                   np.array([r.u for r in records], dtype=float))


def _check_label(label: int, K: int) -> int:
    if int(label) != label or not 0 <= label < K:
        raise BadLabelError(f"label {label!r} outside 0..{K - 1}")
    return int(label)


def rho(probs: Sequence[float], label: int) -> float:
    """Mass of all labels strictly more likely than ``label``."""
    p = make_prob_vector(probs)
    y = _check_label(label, p.size)
    return float(p[p > p[y]].sum())


def rho_matrix(P: np.ndarray) -> np.ndarray:
    """``rho`` for every row and every label of an ``(n, K)`` probability array."""
    P = np.asarray(P, dtype=float)
    greater = P[:, None, :] > P[:, :, None]  # [i, y, y'] = P[i, y'] > P[i, y]
    return np.einsum("iyk,ik->iy", greater, P)


def _combine(r, p, u, scheme: ScoreScheme):
    if scheme is ScoreScheme.NON_RANDOMIZED:
        s = r
    elif scheme is ScoreScheme.RANDOMIZED:
        s = r + u * p
    else:
        s = np.where(r > 0, r + u * p, 0.0)
    # rho + u*p can exceed 1 only through rounding
    return np.minimum(s, 1.0)


def score(probs: Sequence[float], label: int, u: float, scheme) -> float:
    scheme = ScoreScheme.parse(scheme)
    if not 0.0 <= u <= 1.0:
        raise BadUError(f"u must lie in [0, 1], got {u!r}")
    p = make_prob_vector(probs)
    y = _check_label(label, p.size)
    r = float(p[p > p[y]].sum())
    return float(_combine(r, p[y], u, scheme))


def score_matrix(P: np.ndarray, u: np.ndarray, scheme) -> np.ndarray:
    """Scores of all candidate labels, one shared ``u`` per row."""
    scheme = ScoreScheme.parse(scheme)
    P = np.asarray(P, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), (P.shape[0],))
    if np.any((u < 0) | (u > 1)):
        raise BadUError("u must lie in [0, 1]")
    return _combine(rho_matrix(P), P, u[:, None], scheme)


def true_label_scores(P: np.ndarray, labels: np.ndarray, u: np.ndarray, scheme) -> np.ndarray:
    S = score_matrix(P, u, scheme)
    return S[np.arange(S.shape[0]), np.asarray(labels, dtype=np.int64)]


def draw_u(n: int, scheme, rng: RngStream) -> np.ndarray:
    """Randomization draws; the non-randomized scheme records zeros."""
    if not ScoreScheme.parse(scheme).randomized:
        return np.zeros(n)
    return rng.uniform(n)


def score_calibration_set(data: Dataset, predictor, scheme, rng: RngStream) -> ScoreSet:
    """Score every calibration point with its own independent randomization draw."""
    scheme = ScoreScheme.parse(scheme)
    n = len(data)
    if n == 0:
        return ScoreSet(np.empty(0), np.empty(0, dtype=np.int64), np.empty(0))
    P = predict_proba(predictor, data.features)
    u = draw_u(n, scheme, rng)
    return ScoreSet(true_label_scores(P, data.labels, u, scheme), data.labels.copy(), u)


def scores_from_probs(P: np.ndarray, labels: np.ndarray, scheme, u: np.ndarray) -> ScoreSet:
    """Same as :func:`score_calibration_set` for precomputed predictions and draws."""
    labels = np.asarray(labels, dtype=np.int64)
    u = np.asarray(u, dtype=float)
    return ScoreSet(true_label_scores(P, labels, u, scheme), labels.copy(), u.copy())


def oracle_set(probs: Sequence[float], alpha: float, u: float = 0.0,
               randomized: bool = False) -> set[int]:
    """Level set of the true posterior.

    Non-randomized: ``{y : rho_y < 1 - alpha}``. Randomized:
    ``{y : rho_y + u * probs[y] <= 1 - alpha}`` with one ``u`` for all labels.
    """
    alpha = check_alpha(alpha)
    p = make_prob_vector(probs)
    if not 0.0 <= u <= 1.0:
        raise BadUError(f"u must lie in [0, 1], got {u!r}")
    r = rho_matrix(p[None, :])[0]
    if randomized:
        keep = r + u * p <= 1.0 - alpha
    else:
        keep = r < 1.0 - alpha
    return {int(y) for y in np.flatnonzero(keep)}


def oracle_set_tie_broken(probs: Sequence[float], alpha: float,
                          permutation: Sequence[int]) -> set[int]:
    """Non-randomized oracle set with the boundary tie group trimmed.

    The lowest-probability tied group inside the oracle set is included only
    through the shortest prefix of ``permutation`` (restricted to that group)
    whose cumulative mass, added to the mass of the rest of the set, reaches
    ``1 - alpha``.
    """
    alpha = check_alpha(alpha)
    p = make_prob_vector(probs)
    full = oracle_set(p, alpha)
    if not full:
        return full
    lowest = min(p[y] for y in full)
    group = {y for y in full if p[y] == lowest}
    if len(group) < 2 or lowest == 0:
        return full
    order = [int(y) for y in permutation if int(y) in group]
    if set(order) != group:
        raise LabelShiftError("permutation must list every label of the tied group")
    kept = full - group
    mass = float(p[list(kept)].sum()) if kept else 0.0
    for y in order:
        kept.add(y)
        mass += p[y]
        if mass >= 1.0 - alpha:
            break
    return kept
