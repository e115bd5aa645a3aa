"""Speaker change detection over interval statistics of likelihood rows.

Frames are binned into fixed-length intervals by start time, each interval
reduced to its mean row, and consecutive interval means compared by a
p-norm distance.  A boundary is flagged when the distance (or its second
difference) exceeds a threshold placed where two fitted Gaussians - one
for boundaries without a change, one for boundaries with one - predict
equal posterior density.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .classifier import LikelihoodSequence
from .errors import (
    ClassEmptyError,
    DegenerateFitWarning,
    EmptyIntervalError,
    LengthMismatchError,
    TooShortForIntervalsError,
)

_SIGMA_FLOOR = 1e-6

P_NORM_CHOICES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, math.inf)


@dataclass(frozen=True)
class ScdConfig:
    interval_s: float = 1.0
    p: float = 2.0
    use_second_difference: bool = False

    def __post_init__(self):
        if self.interval_s <= 0:
            raise ValueError("interval_s must be > 0")
        if not (self.p > 0):
            raise ValueError("p must be > 0 (math.inf allowed)")


@dataclass(frozen=True)
class IntervalSeries:
    """Mean likelihood row per interval plus the grid geometry."""

    means: np.ndarray
    frames_per_interval: np.ndarray
    interval_s: float

    @property
    def n_intervals(self) -> int:
        return int(self.means.shape[0])

    def interval_start(self, t: int) -> float:
        return t * self.interval_s


@dataclass(frozen=True)
class GaussianPair:
    """Per-class normal fits for boundary distances."""

    mean_neg: float
    std_neg: float
    prior_neg: float
    mean_pos: float
    std_pos: float
    prior_pos: float


@dataclass
class DetectionReport:
    """Per-boundary decisions; boundary t compares intervals t-1 and t."""

    boundary_times: np.ndarray
    distances: np.ndarray
    flags: np.ndarray
    threshold: float
    metric: str


@dataclass(frozen=True)
class Scorecard:
    tp: float
    fp: float
    tn: float
    fn: float

    @property
    def error_rate(self) -> float:
        total = self.tp + self.fp + self.tn + self.fn
        return (self.fn + self.fp) / total if total else 0.0

    @property
    def f1(self) -> float:
        denom = 2.0 * self.tp + self.fp + self.fn
        if denom == 0.0:
            return 1.0
        return 2.0 * self.tp / denom

    @property
    def miss_rate(self) -> float:
        pos = self.tp + self.fn
        return self.fn / pos if pos else 0.0

    @property
    def false_alarm_rate(self) -> float:
        neg = self.tn + self.fp
        return self.fp / neg if neg else 0.0


def interval_means(seq: LikelihoodSequence, interval_s: float) -> IntervalSeries:
    """Bin frames into intervals by start time and average each bin.

    Frame i belongs to interval floor(i * hop / interval_s).  An interval
    is retained only when it lies fully inside the covered duration
    (n - 1) * hop + window; the trailing partial interval is dropped.
    """
    if interval_s < seq.frame_win_s:
        raise ValueError("interval must be at least one frame window long")
    covered = (seq.n_frames - 1) * seq.frame_hop_s + seq.frame_win_s
    n_intervals = int(math.floor(covered / interval_s))
    if n_intervals < 2:
        raise TooShortForIntervalsError(
            f"sequence covers {covered:.3f} s, needs at least two "
            f"{interval_s} s intervals"
        )
    starts = np.arange(seq.n_frames) * seq.frame_hop_s
    assignment = np.floor(starts / interval_s).astype(int)
    means = np.empty((n_intervals, seq.rows.shape[1]))
    counts = np.empty(n_intervals, dtype=int)
    for t in range(n_intervals):
        members = assignment == t
        counts[t] = int(members.sum())
        if counts[t] == 0:
            raise EmptyIntervalError(f"interval {t} received no frames")
        means[t] = seq.rows[members].mean(axis=0)
    return IntervalSeries(means=means, frames_per_interval=counts, interval_s=interval_s)


def pnorm_distance(a: np.ndarray, b: np.ndarray, p: float = 2.0) -> float:
    """(sum |a - b|^p)^(1/p); p = inf gives the max difference.
    Fractional p is accepted with the same formula."""
    if not (p > 0):
        raise ValueError("p must be > 0")
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if math.isinf(p):
        return float(diff.max()) if diff.size else 0.0
    return float(np.sum(diff**p) ** (1.0 / p))


def boundary_distances(series: IntervalSeries, p: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Distance between consecutive interval means.

    Returns (times, distances) for boundaries t = 1 .. n_intervals - 1,
    where the time of boundary t is the start of interval t.
    """
    diffs = np.abs(series.means[1:] - series.means[:-1])
    if math.isinf(p):
        d = diffs.max(axis=1)
    else:
        d = np.sum(diffs**p, axis=1) ** (1.0 / p)
    times = (np.arange(1, series.n_intervals)) * series.interval_s
    return times, d


def second_difference(d: np.ndarray) -> np.ndarray:
    """Per position: (d[t] - d[t-1]) + (d[t] - d[t+1]), edges replicated.

    Sharpens isolated peaks and suppresses slow drifts; using it delays a
    decision by one interval.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape[0] < 2:
        return np.zeros_like(d)
    prev = np.concatenate([[d[0]], d[:-1]])
    nxt = np.concatenate([d[1:], [d[-1]]])
    return (d - prev) + (d - nxt)


def fit_gaussians(values, labels) -> GaussianPair:
    """Per-class mean and unbiased standard deviation with class-frequency
    priors.  Each class needs at least two samples; a zero spread is
    floored at 1e-6."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if values.shape != labels.shape:
        raise LengthMismatchError(
            f"{values.shape[0]} values vs {labels.shape[0]} labels"
        )
    pos = values[labels]
    neg = values[~labels]
    for name, cls in (("negative", neg), ("positive", pos)):
        if cls.shape[0] < 2:
            raise ClassEmptyError(
                f"{name} class has {cls.shape[0]} samples, need at least 2"
            )
    n = values.shape[0]
    return GaussianPair(
        mean_neg=float(neg.mean()),
        std_neg=max(float(neg.std(ddof=1)), _SIGMA_FLOOR),
        prior_neg=neg.shape[0] / n,
        mean_pos=float(pos.mean()),
        std_pos=max(float(pos.std(ddof=1)), _SIGMA_FLOOR),
        prior_pos=pos.shape[0] / n,
    )


def bayes_threshold(g: GaussianPair) -> float:
    """Decision point where the two weighted class densities are equal.

    Equal spreads give the closed form midpoint shifted by the prior
    ratio.  Unequal spreads give a quadratic; the root between the class
    means is used.  When no root lies between the means the midpoint is
    returned and a DegenerateFitWarning is issued.
    """
    mu_n, s_n, pi_n = g.mean_neg, g.std_neg, g.prior_neg
    mu_p, s_p, pi_p = g.mean_pos, g.std_pos, g.prior_pos
    if pi_n <= 0 or pi_p <= 0:
        raise ClassEmptyError("both classes need positive priors")

    if s_n == s_p:
        if mu_p == mu_n:
            warnings.warn("classes share a mean", DegenerateFitWarning)
            return mu_n
        return (mu_n + mu_p) / 2.0 + s_n * s_n * math.log(pi_n / pi_p) / (mu_p - mu_n)

    # log pi_n - log s_n - (x-mu_n)^2 / (2 s_n^2) = same for the positive class
    a = 1.0 / (s_n * s_n) - 1.0 / (s_p * s_p)
    b = -2.0 * (mu_n / (s_n * s_n) - mu_p / (s_p * s_p))
    c = (
        mu_n * mu_n / (s_n * s_n)
        - mu_p * mu_p / (s_p * s_p)
        - 2.0 * math.log((pi_n * s_p) / (pi_p * s_n))
    )
    disc = b * b - 4.0 * a * c
    midpoint = (mu_n + mu_p) / 2.0
    if disc < 0:
        warnings.warn("densities never cross", DegenerateFitWarning)
        return midpoint
    lo, hi = min(mu_n, mu_p), max(mu_n, mu_p)
    roots = [(-b + math.sqrt(disc)) / (2.0 * a), (-b - math.sqrt(disc)) / (2.0 * a)]
    inside = [r for r in roots if lo < r < hi]
    if not inside:
        warnings.warn(
            "no density crossing between the class means", DegenerateFitWarning
        )
        return midpoint
    # with two admissible roots keep the one nearer the midpoint
    return min(inside, key=lambda r: abs(r - midpoint))


def detect(
    seq: LikelihoodSequence, cfg: ScdConfig, threshold: float
) -> DetectionReport:
    """Flag boundaries whose metric exceeds the threshold.

    The metric is the interval-to-interval distance, or its second
    difference when configured.
    """
    series = interval_means(seq, cfg.interval_s)
    times, d = boundary_distances(series, cfg.p)
    if cfg.use_second_difference:
        metric = "second_diff"
        values = second_difference(d)
    else:
        metric = "pnorm"
        values = d
    return DetectionReport(
        boundary_times=times,
        distances=values,
        flags=values > threshold,
        threshold=threshold,
        metric=metric,
    )


def _match_with_tolerance(flags: np.ndarray, truth: np.ndarray, tol: int) -> Scorecard:
    n = flags.shape[0]
    flag_idx = list(np.nonzero(flags)[0])
    truth_idx = list(np.nonzero(truth)[0])
    used = set()
    tp = 0
    for t in truth_idx:
        best = None
        for f in flag_idx:
            if f in used or abs(f - t) > tol:
                continue
            if best is None or abs(f - t) < abs(best - t):
                best = f
        if best is not None:
            used.add(best)
            tp += 1
    fp = len(flag_idx) - len(used)
    fn = len(truth_idx) - tp
    tn = n - tp - fp - fn
    return Scorecard(tp=tp, fp=fp, tn=tn, fn=fn)


def score(flags, truth, tolerance: int = 0) -> Scorecard:
    """Confusion counts of flagged vs true boundaries.

    With tolerance 0 the comparison is positionwise.  A positive tolerance
    matches each true boundary to at most one flag within that many
    boundaries, for ground truth that is not boundary-aligned.
    """
    flags = np.asarray(flags, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if flags.shape != truth.shape:
        raise LengthMismatchError(
            f"{flags.shape[0]} flags vs {truth.shape[0]} truth labels"
        )
    if tolerance > 0:
        return _match_with_tolerance(flags, truth, tolerance)
    tp = int(np.sum(flags & truth))
    fp = int(np.sum(flags & ~truth))
    tn = int(np.sum(~flags & ~truth))
    fn = int(np.sum(~flags & truth))
    return Scorecard(tp=tp, fp=fp, tn=tn, fn=fn)


def theoretical_score(g: GaussianPair, threshold: float) -> Scorecard:
    """Expected rates if both classes are exactly the fitted Gaussians.

    Miss rate is the positive mass below the threshold, false alarm rate
    the negative mass above it; the expected confusion counts are per
    boundary, weighted by the priors.
    """
    fnr = float(ndtr((threshold - g.mean_pos) / g.std_pos))
    fpr = 1.0 - float(ndtr((threshold - g.mean_neg) / g.std_neg))
    return Scorecard(
        tp=g.prior_pos * (1.0 - fnr),
        fn=g.prior_pos * fnr,
        fp=g.prior_neg * fpr,
        tn=g.prior_neg * (1.0 - fpr),
    )


class SpeakerChangeDetector(BaseEstimator):
    """Estimator face: fit a threshold on labeled boundaries, then flag.

    X is a matrix of log-likelihood rows (or a LikelihoodSequence); y is
    one boolean per boundary saying whether a change happens there.
    """

    def __init__(
        self,
        interval_s=1.0,
        p=2.0,
        use_second_difference=False,
        frame_hop_s=0.03,
        frame_win_s=0.1,
    ):
        self.interval_s = interval_s
        self.p = p
        self.use_second_difference = use_second_difference
        self.frame_hop_s = frame_hop_s
        self.frame_win_s = frame_win_s

    def _as_sequence(self, X) -> LikelihoodSequence:
        if isinstance(X, LikelihoodSequence):
            return X
        return LikelihoodSequence(
            rows=np.asarray(X, dtype=np.float64),
            frame_hop_s=self.frame_hop_s,
            frame_win_s=self.frame_win_s,
        )

    def _config(self) -> ScdConfig:
        return ScdConfig(
            interval_s=self.interval_s,
            p=self.p,
            use_second_difference=self.use_second_difference,
        )

    def decision_function(self, X) -> np.ndarray:
        series = interval_means(self._as_sequence(X), self.interval_s)
        _, d = boundary_distances(series, self.p)
        return second_difference(d) if self.use_second_difference else d

    def fit(self, X, y):
        values = self.decision_function(X)
        y = np.asarray(y, dtype=bool)
        if y.shape != values.shape:
            raise LengthMismatchError(
                f"{values.shape[0]} boundaries vs {y.shape[0]} labels"
            )
        self.gaussians_ = fit_gaussians(values, y)
        self.threshold_ = bayes_threshold(self.gaussians_)
        return self

    def _require_fitted(self):
        if not hasattr(self, "threshold_"):
            raise NotFittedError("fit must be called first")

    def predict(self, X) -> np.ndarray:
        self._require_fitted()
        return self.decision_function(X) > self.threshold_

    def score(self, X, y) -> float:
        """F1 of the flags against the given boundary labels."""
        self._require_fitted()
        return score(self.predict(X), np.asarray(y, dtype=bool)).f1
