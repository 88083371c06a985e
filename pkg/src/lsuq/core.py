"""Domain types, validation and the reproducible randomness contract.

Class labels are 0-based everywhere inside the package. The 1-based
convention of external files is handled only in :mod:`lsuq.io`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9


class LabelShiftError(ValueError):
    """Base class for all input and contract violations raised by lsuq."""


class NegativeEntryError(LabelShiftError):
    pass


class NotNormalizedError(LabelShiftError):
    pass


class BadLengthError(LabelShiftError):
    pass


class AllZeroError(LabelShiftError):
    pass


class BadLabelError(LabelShiftError):
    pass


class BadUError(LabelShiftError):
    pass


class BadAlphaError(LabelShiftError):
    pass


def make_prob_vector(raw: Sequence[float], tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a point of the probability simplex.

    Entries must be nonnegative and sum to one within ``tol``; inside the
    tolerance the vector is silently renormalized. The result is a read-only
    float array.
    """
    p = np.array(raw, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise BadLengthError(f"probability vector needs K >= 2 entries, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NotNormalizedError("probability vector has non-finite entries")
    if np.any(p < 0):
        raise NegativeEntryError(f"negative probability entry: {p.min()!r}")
    s = p.sum()
    if abs(s - 1.0) > tol:
        raise NotNormalizedError(f"entries sum to {s!r}, not 1")
    p = np.minimum(p / s, 1.0)
    p.setflags(write=False)
    return p


def validate_prob_matrix(probs: np.ndarray, tol: float = SIMPLEX_TOL,
                         renormalize: bool = True) -> np.ndarray:
    """Row-wise version of :func:`make_prob_vector` for an ``(n, K)`` array.

    With ``renormalize=False`` rows are checked but returned unchanged.
    """
    P = np.array(probs, dtype=float, ndmin=2)
    if P.ndim != 2 or P.shape[1] < 2:
        raise BadLengthError(f"expected an (n, K>=2) array, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise NotNormalizedError("probability rows have non-finite entries")
    if np.any(P < 0):
        raise NegativeEntryError("negative probability entry")
    s = P.sum(axis=1)
    bad = np.abs(s - 1.0) > tol
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NotNormalizedError(f"row {i} sums to {s[i]!r}, not 1")
    if not renormalize:
        return P
    return np.minimum(P / s[:, None], 1.0)


def make_weight_vector(raw: Sequence[float]) -> np.ndarray:
    """Validate per-class importance weights ``w(y) = q(y) / p(y)``."""
    w = np.array(raw, dtype=float)
    if w.ndim != 1 or w.size < 1:
        raise BadLengthError(f"weight vector must be 1-d and nonempty, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise LabelShiftError("weight vector has non-finite entries")
    if np.any(w < 0):
        raise NegativeEntryError(f"negative importance weight: {w.min()!r}")
    if not np.any(w > 0):
        raise AllZeroError("weight vector has no positive entry")
    w.setflags(write=False)
    return w


def min_nonzero(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    nz = w[w != 0]
    if nz.size == 0:
        raise AllZeroError("weight vector has no nonzero entry")
    return float(nz.min())


def condition_number(w: Sequence[float]) -> float:
    """Ratio of the largest weight to the smallest nonzero weight."""
    w = np.asarray(w, dtype=float)
    return float(w.max()) / min_nonzero(w)


def weights_from_priors(source: Sequence[float], target: Sequence[float]) -> np.ndarray:
    """Return the true importance weights ``q / p`` (zero where ``q`` is zero)."""
    p = np.asarray(source, dtype=float)
    q = np.asarray(target, dtype=float)
    if np.any((q > 0) & (p == 0)):
        raise LabelShiftError("target puts mass on a class absent from the source")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(q > 0, q / np.where(p > 0, p, 1.0), 0.0)
    return make_weight_vector(w)


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise BadAlphaError(f"alpha must lie in (0, 1), got {alpha!r}")
    return alpha


class RngStream:
    """A reproducible, independent stream of random numbers.

    Streams are keyed by ``(master_seed, stream_index)``; the index may be a
    single integer or a tuple (a path in the spawn tree). Each stream is a
    Philox counter-based generator seeded through :class:`numpy.random.SeedSequence`,
    so distinct indices give statistically independent sequences and the
    same key always reproduces the same draws.
    """

    def __init__(self, master_seed: int, stream_index: int | tuple[int, ...] = 0):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        if isinstance(stream_index, (int, np.integer)):
            stream_index = (int(stream_index),)
        self.stream_index = tuple(int(i) for i in stream_index)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.stream_index)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "RngStream":
        """An independent sub-stream, e.g. one per purpose inside a replication."""
        return RngStream(self.master_seed, self.stream_index + (int(index),))

    def uniform(self, size=None):
        return self.generator.random(size)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_index={self.stream_index})"


def uniform_draw(stream: RngStream) -> float:
    """Next Unif[0, 1) value of ``stream``."""
    return float(stream.generator.random())


class LabeledSample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``(n, d)`` with 0-based integer labels in ``range(class_count)``."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    empty_classes: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.labels)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise BadLabelError("labels must be integers")
        y = y.astype(np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise LabelShiftError(
                f"features {X.shape} and labels {y.shape} disagree on sample count")
        K = int(self.class_count)
        if K < 1:
            raise BadLengthError("class_count must be positive")
        if y.size and (y.min() < 0 or y.max() >= K):
            raise BadLabelError(f"labels must lie in 0..{K - 1}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", K)
        counts = np.bincount(y, minlength=K)
        object.__setattr__(self, "empty_classes", tuple(int(k) for k in np.flatnonzero(counts == 0)))

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample], class_count: int) -> "Dataset":
        if not samples:
            return cls(np.empty((0, 1)), np.empty(0, dtype=np.int64), class_count)
        X = np.stack([np.atleast_1d(np.asarray(s.features, dtype=float)) for s in samples])
        return cls(X, np.array([s.label for s in samples]), class_count)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __iter__(self) -> Iterator[LabeledSample]:
        for x, y in zip(self.features, self.labels):
            yield LabeledSample(x, int(y))

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.class_count)


def predict_proba(predictor, X: np.ndarray) -> np.ndarray:
    """Apply a predictor (callable ``(n, d) -> (n, K)``) and validate its rows."""
    return validate_prob_matrix(predictor(np.asarray(X, dtype=float)))
