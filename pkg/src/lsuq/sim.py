"""Synthetic data, reference classifiers and the Monte Carlo replication engine."""

from __future__ import annotations

import functools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import log_softmax, logit
from scipy.stats import norm

from .calibration import (
    UNIFORM_MASS,
    bin_frequencies_from_probs,
    fit_binning,
    reliability_from_probs,
    reweight_bins,
)
from .conformal import (
    calibrate_label_conditional,
    calibrate_standard,
    calibrate_weighted,
    evaluate_probs,
)
from .core import (
    Dataset,
    LabelShiftError,
    RngStream,
    check_alpha,
    make_prob_vector,
    predict_proba,
    weights_from_priors,
)
from .scores import ScoreScheme, draw_u, scores_from_probs
from .shift import estimate_weights


class BadCovarianceError(LabelShiftError):
    pass


class SingularCovarianceError(LabelShiftError):
    pass


class EmptyClassError(LabelShiftError):
    pass


class MissingClassError(LabelShiftError):
    pass


class BadFractionsError(LabelShiftError):
    pass


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Classes with prior ``class_priors[y]`` and features ``N(means[y], covariance)``."""

    class_priors: np.ndarray
    means: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    precision: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pri = make_prob_vector(self.class_priors)
        mu = np.array(self.means, dtype=float, ndmin=2)
        S = np.array(self.covariance, dtype=float, ndmin=2)
        if mu.shape[0] != pri.size:
            raise LabelShiftError(f"{mu.shape[0]} means for {pri.size} classes")
        if S.shape != (mu.shape[1], mu.shape[1]):
            raise BadCovarianceError(f"covariance {S.shape} does not match dimension {mu.shape[1]}")
        if not np.allclose(S, S.T):
            raise BadCovarianceError("covariance is not symmetric")
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise BadCovarianceError("covariance is not positive definite") from None
        for name, value in (("class_priors", pri), ("means", mu), ("covariance", S),
                            ("chol", L), ("precision", np.linalg.inv(S))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def class_count(self) -> int:
        return int(self.class_priors.size)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def with_priors(self, priors: Sequence[float]) -> "GaussianMixtureSpec":
        return GaussianMixtureSpec(priors, self.means, self.covariance)

    def discriminants(self, X: np.ndarray) -> np.ndarray:
        """Log prior plus log likelihood, up to a term shared by all classes."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        A = self.means @ self.precision
        quad = 0.5 * np.einsum("kd,kd->k", A, self.means)
        with np.errstate(divide="ignore"):
            logp = np.log(self.class_priors)
        return X @ A.T - quad[None, :] + logp[None, :]


def sample_mixture(spec: GaussianMixtureSpec, n: int, rng: RngStream) -> Dataset:
    """Labels from the priors, then ``mean + L z`` with ``L`` the Cholesky factor."""
    if n < 1:
        raise LabelShiftError("sample size must be at least 1")
    g = rng.generator
    y = g.choice(spec.class_count, size=n, p=spec.class_priors)
    Z = g.standard_normal((n, spec.dim))
    return Dataset(spec.means[y] + Z @ spec.chol.T, y, spec.class_count)


def bayes_posterior_matrix(spec: GaussianMixtureSpec, X: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(spec.discriminants(X), axis=1))


def bayes_posterior(spec: GaussianMixtureSpec, x: Sequence[float]) -> np.ndarray:
    """Class posterior at ``x``: prior times Gaussian density, normalized."""
    return make_prob_vector(bayes_posterior_matrix(spec, np.atleast_2d(x))[0])


class MixturePosterior:
    """Predictor returning the posterior of a Gaussian mixture with shared covariance."""

    def __init__(self, spec: GaussianMixtureSpec):
        self.spec = spec

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return bayes_posterior_matrix(self.spec, X)

    def __repr__(self):
        return f"MixturePosterior({self.spec!r})"


def fisher_lda_fit(train: Dataset) -> MixturePosterior:
    """Plug-in posterior with class means, pooled covariance and empirical priors."""
    K = train.class_count
    counts = train.class_counts()
    if np.any(counts == 0):
        raise EmptyClassError(f"classes {tuple(np.flatnonzero(counts == 0))} absent from training data")
    if np.any(counts < 2):
        raise EmptyClassError("each class needs at least two training samples")
    X, y = train.features, train.labels
    means = np.stack([X[y == k].mean(axis=0) for k in range(K)])
    R = X - means[y]
    pooled = R.T @ R / (len(train) - K)
    if np.linalg.cond(pooled) > 1e12:
        raise SingularCovarianceError("pooled covariance is singular")
    return MixturePosterior(GaussianMixtureSpec(counts / counts.sum(), means, pooled))


def binary_bin_probabilities(data_spec: GaussianMixtureSpec, predictor_spec: GaussianMixtureSpec,
                             edges: Sequence[float], priors: Sequence[float] | None = None,
                             positive_class: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Exact bin-conditional class probabilities for a binary linear-logit predictor.

    The predictor's log-odds ``a.x + b`` is Gaussian given the class, so the
    probability that the positive-class output lands in ``[e_j, e_{j+1})``
    follows from normal CDFs. Returns ``(pi, mass)``: ``pi[m, y] = P(Y=y | bin m)``
    under ``priors`` (default: the data spec's priors) and ``mass[m] = P(bin m)``.
    """
    if data_spec.class_count != 2 or predictor_spec.class_count != 2:
        raise LabelShiftError("exact bin probabilities need a binary problem")
    pri = data_spec.class_priors if priors is None else make_prob_vector(priors)
    neg = 1 - positive_class
    P = predictor_spec.precision
    d = predictor_spec.means[positive_class] - predictor_spec.means[neg]
    a = P @ d
    b = (-0.5 * (predictor_spec.means[positive_class] @ P @ predictor_spec.means[positive_class]
                 - predictor_spec.means[neg] @ P @ predictor_spec.means[neg])
         + math.log(predictor_spec.class_priors[positive_class] / predictor_spec.class_priors[neg]))
    sd = math.sqrt(a @ data_spec.covariance @ a)
    with np.errstate(divide="ignore"):
        cuts = logit(np.asarray(edges, dtype=float))
    loc = data_spec.means @ a + b
    cdf = norm.cdf((cuts[:, None] - loc[None, :]) / sd)
    cdf[-1] = 1.0
    cond = np.diff(cdf, axis=0)  # [m, y] = P(bin m | Y = y)
    joint = cond * pri[None, :]
    mass = joint.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = joint / mass[:, None]
    return pi, mass


def resample_label_shift(data: Dataset, target_priors: Sequence[float], n: int,
                         rng: RngStream) -> Dataset:
    """Draw labels from ``target_priors``, then a stored sample of each label with replacement."""
    q = make_prob_vector(target_priors)
    if q.size != data.class_count:
        raise LabelShiftError("target priors and data disagree on the class count")
    missing = [k for k in np.flatnonzero(q > 0) if k in data.empty_classes]
    if missing:
        raise MissingClassError(f"classes {tuple(missing)} have target mass but no samples")
    g = rng.generator
    y = g.choice(q.size, size=n, p=q)
    pools = [np.flatnonzero(data.labels == k) for k in range(q.size)]
    idx = np.empty(n, dtype=np.int64)
    for k in np.unique(y):
        at = np.flatnonzero(y == k)
        idx[at] = pools[k][g.integers(0, pools[k].size, size=at.size)]
    return data.subset(idx)


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Floor of ``f * n`` with the remainder given to the largest fractional parts."""
    f = np.asarray(fractions, dtype=float)
    if f.size == 0 or np.any(f <= 0) or abs(f.sum() - 1.0) > 1e-9:
        raise BadFractionsError(f"fractions must be positive and sum to 1, got {list(f)}")
    exact = f * n
    sizes = np.floor(exact).astype(np.int64)
    rest = n - int(sizes.sum())
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[:rest]] += 1
    return sizes.tolist()


def split_dataset(data: Dataset, fractions: Sequence[float], rng: RngStream) -> list[Dataset]:
    """Uniformly random partition into disjoint parts of the requested fractions."""
    sizes = split_sizes(len(data), fractions)
    perm = rng.generator.permutation(len(data))
    cuts = np.cumsum(sizes)[:-1]
    return [data.subset(np.sort(part)) for part in np.split(perm, cuts)]


# Scenario presets: priors and class-conditional Gaussians of the two toy problems.
SCENARIOS: dict[str, dict[str, Any]] = {
    "toy3class": {
        "source_priors": (0.1, 0.6, 0.3),
        "target_priors": (0.3, 0.2, 0.5),
        "means": ((-2.0, 0.0), (2.0, 0.0), (0.0, 2.0 * math.sqrt(3.0))),
        "covariance": ((4.0, 0.0), (0.0, 4.0)),
    },
    "binary": {
        "source_priors": (0.5, 0.5),
        "target_priors": (0.2, 0.8),
        "means": ((-1.0, 0.0), (1.0, 0.0)),
        "covariance": ((0.75, 0.25), (0.25, 0.75)),
    },
}

MODES = ("standard", "weighted", "label-conditional", "binning")
WEIGHT_SOURCES = ("oracle", "bbse-soft", "bbse-hard", "uniform")
PREDICTORS = ("bayes", "lda")


def scenario_spec(name: str, priors: Sequence[float] | None = None) -> GaussianMixtureSpec:
    s = SCENARIOS[name]
    return GaussianMixtureSpec(s["source_priors"] if priors is None else priors,
                               s["means"], s["covariance"])


def _as_tuple(value, cast=str) -> tuple:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    elif not isinstance(value, (list, tuple)):
        value = [value]
    return tuple(cast(v.strip()) if isinstance(v, str) else cast(v) for v in value)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "toy3class"
    source_priors: tuple[float, ...] | None = None
    target_priors: tuple[float, ...] | None = None
    n_train: int = 1000
    n_cal: int = 1000
    n_est_source: int = 4000
    n_est_target: int = 4000
    n_test: int = 2000
    alpha: float = 0.1
    scheme: str = "randomized"
    modes: tuple[str, ...] = ("standard", "weighted")
    weight_sources: tuple[str, ...] = ("oracle", "bbse-soft")
    predictor: str = "bayes"
    bins: int = 10
    force_top: bool = False
    replications: int = 1000
    seed: int = 0
    timing: bool = False
    workers: int = 1
    pool: str | None = None

    def __post_init__(self):
        set_ = functools.partial(object.__setattr__, self)
        if self.scenario not in SCENARIOS and self.scenario != "file":
            raise LabelShiftError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "file":
            if not self.pool:
                raise LabelShiftError("the file scenario needs a 'pool' prediction file")
            if self.source_priors is None or self.target_priors is None:
                raise LabelShiftError("the file scenario needs source_priors and target_priors")
        for name in ("source_priors", "target_priors"):
            value = getattr(self, name)
            if value is not None:
                set_(name, tuple(float(v) for v in make_prob_vector(_as_tuple(value, float))))
        for name in ("n_train", "n_cal", "n_est_source", "n_est_target", "n_test"):
            if int(getattr(self, name)) < 1:
                raise LabelShiftError(f"{name} must be positive")
            set_(name, int(getattr(self, name)))
        set_("alpha", check_alpha(self.alpha))
        set_("scheme", ScoreScheme.parse(self.scheme).value)
        set_("modes", _as_tuple(self.modes))
        set_("weight_sources", _as_tuple(self.weight_sources))
        for m in self.modes:
            if m not in MODES:
                raise LabelShiftError(f"unknown mode {m!r}; choose from {MODES}")
        for w in self.weight_sources:
            if w not in WEIGHT_SOURCES:
                raise LabelShiftError(f"unknown weight source {w!r}; choose from {WEIGHT_SOURCES}")
        if self.predictor not in PREDICTORS:
            raise LabelShiftError(f"unknown predictor {self.predictor!r}")
        if int(self.replications) < 1 or int(self.bins) < 1 or int(self.workers) < 1:
            raise LabelShiftError("replications, bins and workers must be positive")
        for name in ("replications", "bins", "workers", "seed"):
            set_(name, int(getattr(self, name)))
        set_("force_top", bool(self.force_top))
        set_("timing", bool(self.timing))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise LabelShiftError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def priors(self) -> tuple[np.ndarray, np.ndarray]:
        base = SCENARIOS.get(self.scenario, {})
        p = self.source_priors or base.get("source_priors")
        q = self.target_priors or base.get("target_priors")
        return np.asarray(p, dtype=float), np.asarray(q, dtype=float)

    def methods(self) -> list[str]:
        out = []
        for m in self.modes:
            if m in ("weighted", "binning"):
                out.extend(f"{m}-{w}" for w in self.weight_sources)
            else:
                out.append(m)
        return out


@dataclass
class ResultRow:
    replication: int
    method: str
    coverage: float = math.nan
    mean_size: float = math.nan
    per_class_coverage: tuple[float, ...] = ()
    thresholds: tuple[float, ...] = ()
    weight_error_sup: float = math.nan
    ece: float = math.nan
    wall_time_ms: float = math.nan
    error: str = ""


RESULT_COLUMNS = ("replication", "method", "coverage", "mean_size", "per_class_coverage",
                  "thresholds", "weight_error_sup", "ece", "wall_time_ms", "error")


@functools.lru_cache(maxsize=4)
def _load_pool(path: str) -> Dataset:
    from .io import read_predictions

    pf = read_predictions(path, require_labels=True)
    return Dataset(pf.probs, pf.labels, pf.probs.shape[1])


@dataclass
class _Draw:
    cal_P: np.ndarray
    cal_y: np.ndarray
    est_src_P: np.ndarray
    est_src_y: np.ndarray
    est_tgt_P: np.ndarray
    test_P: np.ndarray
    test_y: np.ndarray


def _draw_synthetic(cfg: ExperimentConfig, rng: RngStream) -> _Draw:
    p, q = cfg.priors()
    src = scenario_spec(cfg.scenario, p)
    tgt = src.with_priors(q)
    if cfg.predictor == "lda":
        predictor = fisher_lda_fit(sample_mixture(src, cfg.n_train, rng.child(0)))
    else:
        predictor = MixturePosterior(src)
    cal = sample_mixture(src, cfg.n_cal, rng.child(1))
    est_s = sample_mixture(src, cfg.n_est_source, rng.child(2))
    est_t = sample_mixture(tgt, cfg.n_est_target, rng.child(3))
    test = sample_mixture(tgt, cfg.n_test, rng.child(4))
    f = functools.partial(predict_proba, predictor)
    return _Draw(f(cal.features), cal.labels, f(est_s.features), est_s.labels,
                 f(est_t.features), f(test.features), test.labels)


def _draw_from_pool(cfg: ExperimentConfig, rng: RngStream) -> _Draw:
    p, q = cfg.priors()
    pool = _load_pool(cfg.pool)
    d1, d2 = split_dataset(pool, (0.5, 0.5), rng.child(0))
    n_src = cfg.n_cal + cfg.n_est_source
    n_tgt = cfg.n_est_target + cfg.n_test
    s = resample_label_shift(d1, p, n_src, rng.child(1))
    t = resample_label_shift(d2, q, n_tgt, rng.child(2))
    cal, est_s = split_dataset(s, (cfg.n_cal / n_src, cfg.n_est_source / n_src), rng.child(3))
    est_t, test = split_dataset(t, (cfg.n_est_target / n_tgt, cfg.n_test / n_tgt), rng.child(4))
    return _Draw(cal.features, cal.labels, est_s.features, est_s.labels,
                 est_t.features, test.features, test.labels)


def _weights_for(source: str, draw: _Draw, true_w: np.ndarray) -> np.ndarray:
    if source == "oracle":
        return true_w
    if source == "uniform":
        return np.ones_like(true_w)
    return estimate_weights(draw.est_src_P, draw.est_src_y, draw.est_tgt_P,
                            soft=(source == "bbse-soft")).weights


def run_replication(cfg: ExperimentConfig, rep: int) -> list[ResultRow]:
    """All configured methods on one independent draw of the data."""
    rng = RngStream(cfg.seed, rep)
    methods = cfg.methods()
    try:
        draw = _draw_from_pool(cfg, rng) if cfg.scenario == "file" else _draw_synthetic(cfg, rng)
    except LabelShiftError as exc:
        return [ResultRow(rep, m, error=f"{type(exc).__name__}: {exc}") for m in methods]
    p, q = cfg.priors()
    true_w = weights_from_priors(p, q)
    scheme = ScoreScheme.parse(cfg.scheme)
    K = draw.cal_P.shape[1]
    cal_scores = scores_from_probs(draw.cal_P, draw.cal_y, scheme,
                                   draw_u(len(draw.cal_y), scheme, rng.child(5)))
    test_u = draw_u(len(draw.test_y), scheme, rng.child(6))
    weights_cache: dict[str, np.ndarray] = {}
    rows = []
    for method in methods:
        t0 = time.perf_counter()
        row = ResultRow(rep, method)
        try:
            mode, _, source = method.partition("-") if method.startswith(("weighted", "binning")) \
                else (method, "", "")
            w = None
            if source:
                if source not in weights_cache:
                    weights_cache[source] = _weights_for(source, draw, true_w)
                w = weights_cache[source]
                row.weight_error_sup = float(np.max(np.abs(w - true_w)))
            if mode == "binning":
                scheme_b = fit_binning(draw.cal_P, cfg.bins, UNIFORM_MASS)
                calib = bin_frequencies_from_probs(draw.cal_P, draw.cal_y, scheme_b)
                calib = reweight_bins(calib, w)
                rep_ = reliability_from_probs(calib, draw.test_P, draw.test_y, use_reweighted=True)
                row.ece = rep_.ece
            else:
                if mode == "standard":
                    model = calibrate_standard(cal_scores, cfg.alpha, scheme, cfg.force_top)
                elif mode == "weighted":
                    model = calibrate_weighted(cal_scores, w, cfg.alpha, scheme, cfg.force_top)
                else:
                    model = calibrate_label_conditional(cal_scores, cfg.alpha, K, scheme,
                                                        cfg.force_top)
                ev = evaluate_probs(model, draw.test_P, draw.test_y, test_u)
                row.coverage = ev.coverage
                row.mean_size = ev.mean_size
                row.per_class_coverage = tuple(float(c) for c in ev.per_class_coverage)
                row.thresholds = tuple(float(t) for t in np.atleast_1d(model.thresholds))
        except LabelShiftError as exc:
            row.error = f"{type(exc).__name__}: {exc}"
        if cfg.timing:
            row.wall_time_ms = (time.perf_counter() - t0) * 1e3
        rows.append(row)
    return rows


def _run_chunk(cfg: ExperimentConfig, reps: Sequence[int]) -> list[ResultRow]:
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [row for r in reps for row in run_replication(cfg, r)]


def run_experiment(cfg: ExperimentConfig) -> list[ResultRow]:
    """Run ``cfg.replications`` independent replications.

    Rows are sorted by replication index and method order, so the table is
    identical for any worker count.
    """
    reps = list(range(cfg.replications))
    if cfg.workers == 1:
        rows = _run_chunk(cfg, reps)
    else:
        chunks = [reps[i::cfg.workers] for i in range(cfg.workers)]
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            rows = [row for part in ex.map(_run_chunk, [cfg] * len(chunks), chunks) for row in part]
    order = {m: i for i, m in enumerate(cfg.methods())}
    rows.sort(key=lambda r: (r.replication, order[r.method]))
    return rows


def summarize(rows: Sequence[ResultRow], column: str = "coverage") -> dict[str, dict[str, float]]:
    """Mean, median and Monte Carlo standard error of ``column`` per method."""
    out: dict[str, dict[str, float]] = {}
    for method in dict.fromkeys(r.method for r in rows):
        v = np.array([getattr(r, column) for r in rows if r.method == method and not r.error])
        v = v[np.isfinite(v)]
        if v.size == 0:
            continue
        out[method] = {
            "mean": float(v.mean()),
            "median": float(np.median(v)),
            "se": float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan,
            "n": int(v.size),
        }
    return out
