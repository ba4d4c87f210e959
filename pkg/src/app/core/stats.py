"""
Statistics for model evaluation.

Classification metrics (AUROC, Youden operating point, sensitivity at fixed
specificity), logit-scale model-fit tests pooled across folds with the
Satterthwaite approximation, Student-t tail probabilities, vote-based
prediction confidence and a Welch comparison of confidence between correct
and incorrect predictions.

All functions are pure.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as sps
from scipy.special import betainc
from sklearn.metrics import roc_auc_score, roc_curve

from app.core.config import settings
from app.core.errors import ArgumentError, MetricError

logger = logging.getLogger(__name__)

ArrayLike = Union[Sequence[float], np.ndarray]

ALPHA = 0.05
SPEC_TARGETS = (0.8, 0.9)
METRIC_NAMES = (
    "auroc",
    "balanced_accuracy",
    "sensitivity_youden",
    "specificity_youden",
    "sensitivity_at_80_spec",
    "sensitivity_at_90_spec",
    "f1_youden",
    "accuracy_youden",
)


# ---------- Classification metrics ----------


def _scores_labels(scores: ArrayLike, labels: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ArgumentError(f"{s.size} scores for {y.size} labels")
    if np.unique(y).size < 2:
        raise MetricError("metric undefined: labels contain a single class")
    return s, y


def auroc(scores: ArrayLike, labels: ArrayLike) -> float:
    """Area under the ROC curve; tied scores count one half."""
    s, y = _scores_labels(scores, labels)
    return float(roc_auc_score(y, s))


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    youden_j: float
    f1: float
    accuracy: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "threshold": self.threshold,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "balanced_accuracy": self.balanced_accuracy,
            "youden_j": self.youden_j,
            "f1": self.f1,
            "accuracy": self.accuracy,
        }


def youden_operating_point(scores: ArrayLike, labels: ArrayLike) -> OperatingPoint:
    """Threshold maximizing sens + spec - 1 (a sample is positive if score >= threshold).

    Among equally good thresholds the lowest one wins.
    """
    s, y = _scores_labels(scores, labels)
    fpr, tpr, thresholds = roc_curve(y, s, drop_intermediate=False)
    j = tpr - fpr
    # thresholds are decreasing, so the last maximizer is the lowest threshold
    best = int(np.flatnonzero(j == j.max())[-1])
    thr = float(thresholds[best])
    pred = s >= thr
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    sens, spec = float(tpr[best]), float(1.0 - fpr[best])
    return OperatingPoint(
        threshold=thr,
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=(sens + spec) / 2.0,
        youden_j=float(j[best]),
        f1=float(f1),
        accuracy=float(np.mean(pred == (y == 1))),
    )


def sens_at_spec(scores: ArrayLike, labels: ArrayLike, spec_target: float = 0.8) -> float:
    """Sensitivity at the lowest threshold whose specificity reaches ``spec_target``."""
    if not 0.0 < spec_target <= 1.0:
        raise ArgumentError(f"specificity target must be in (0, 1], got {spec_target}")
    s, y = _scores_labels(scores, labels)
    fpr, tpr, _ = roc_curve(y, s, drop_intermediate=False)
    ok = np.flatnonzero(1.0 - fpr >= spec_target - 1e-12)
    return float(tpr[ok[-1]])


def classification_metrics(scores: ArrayLike, labels: ArrayLike) -> Dict[str, float]:
    op = youden_operating_point(scores, labels)
    return {
        "auroc": auroc(scores, labels),
        "balanced_accuracy": op.balanced_accuracy,
        "sensitivity_youden": op.sensitivity,
        "specificity_youden": op.specificity,
        "sensitivity_at_80_spec": sens_at_spec(scores, labels, 0.8),
        "sensitivity_at_90_spec": sens_at_spec(scores, labels, 0.9),
        "f1_youden": op.f1,
        "accuracy_youden": op.accuracy,
    }


# ---------- Logit scale ----------


def clamp_probability(
    p: ArrayLike, eps: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Clamp into [eps, 1 - eps]; returns (clamped values, clamped flags)."""
    eps = settings.LOGIT_EPS if eps is None else eps
    arr = np.asarray(p, dtype=np.float64)
    clipped = np.clip(arr, eps, 1.0 - eps)
    return clipped, clipped != arr


def logit_transform(p: ArrayLike, eps: Optional[float] = None) -> np.ndarray:
    """``ln(p / (1 - p))`` after clamping ``p`` into [eps, 1 - eps]."""
    clipped, _ = clamp_probability(p, eps)
    return np.log(clipped / (1.0 - clipped))


# ---------- Student t ----------


def student_t_sf(t: ArrayLike, df: ArrayLike) -> np.ndarray | float:
    """P(T_df > t) through the regularized incomplete beta function."""
    t_arr = np.asarray(t, dtype=np.float64)
    df_arr = np.asarray(df, dtype=np.float64)
    if np.any(df_arr <= 0):
        raise ArgumentError("degrees of freedom must be positive")
    x = df_arr / (df_arr + t_arr * t_arr)
    tail = 0.5 * betainc(df_arr / 2.0, 0.5, x)
    out = np.where(t_arr > 0, tail, 1.0 - tail)
    return float(out) if out.ndim == 0 else out


def two_sided_p(t: ArrayLike, df: ArrayLike) -> np.ndarray | float:
    p = 2.0 * np.asarray(student_t_sf(np.abs(np.asarray(t, dtype=np.float64)), df))
    p = np.minimum(p, 1.0)
    return float(p) if p.ndim == 0 else p


# ---------- Satterthwaite pooling ----------


@dataclass(frozen=True)
class FoldStat:
    """Sample mean and variance (ddof 1) of one fold's draws."""

    mean: float
    variance: float
    n: int
    index: int = 0

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ArgumentError(f"fold {self.index}: at least 2 draws required, got {self.n}")
        if self.variance < 0:
            raise ArgumentError(f"fold {self.index}: negative variance")

    @classmethod
    def from_samples(cls, values: ArrayLike, index: int = 0) -> "FoldStat":
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.size < 2:
            raise ArgumentError(f"fold {index}: at least 2 draws required, got {v.size}")
        return cls(float(v.mean()), float(v.var(ddof=1)), int(v.size), index)


@dataclass(frozen=True)
class Satterthwaite:
    se: float
    df: float
    zero_variance: bool = False


def satterthwaite_pool(folds: Sequence[FoldStat]) -> Satterthwaite:
    """Unequal-variance standard error and effective degrees of freedom.

    ``SE = sqrt(sum(s_i^2 / n_i))``;
    ``df = SE^4 / sum((s_i^2 / n_i)^2 / (n_i - 1))``. With zero variance in
    every fold df falls back to ``sum(n_i - 1)``.
    """
    if not folds:
        raise ArgumentError("at least one fold is required")
    terms = np.array([f.variance / f.n for f in folds])
    dof = np.array([f.n - 1 for f in folds], dtype=np.float64)
    total = float(terms.sum())
    se = float(np.sqrt(total))
    if total == 0.0:
        return Satterthwaite(se, float(dof.sum()), zero_variance=True)
    df = total**2 / float(np.sum(terms**2 / dof))
    return Satterthwaite(se, df)


class Tail(str, Enum):
    GREATER = "one-sided-greater"
    TWO_SIDED = "two-sided"


@dataclass(frozen=True)
class PooledStat:
    """Cross-fold estimate with a t test against zero."""

    mean: float
    se: float
    df: float
    t: float
    p: float
    tail: Tail
    ci_low: float
    ci_high: float
    k: int
    flags: Tuple[str, ...] = ()

    def significant(self, alpha: float = ALPHA) -> bool:
        return self.p < alpha

    def to_dict(self) -> Dict[str, object]:
        return {
            "mean": self.mean,
            "se": self.se,
            "df": self.df,
            "t": self.t,
            "p": self.p,
            "tail": self.tail.value,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "k": self.k,
            "flags": list(self.flags),
        }


def _p_for(t: float, df: float, tail: Tail) -> float:
    if tail is Tail.GREATER:
        return float(student_t_sf(t, df))
    return float(two_sided_p(t, df))


def pool_samples(
    per_fold: Sequence[ArrayLike], tail: Tail = Tail.TWO_SIDED
) -> PooledStat:
    """Pool per-fold draw samples into one mean and t test against zero.

    The pooled mean is the mean of fold means; its standard error is the
    Satterthwaite SE divided by the fold count, with the same df.
    """
    folds = [FoldStat.from_samples(v, i) for i, v in enumerate(per_fold)]
    pooled = satterthwaite_pool(folds)
    k = len(folds)
    mean = float(np.mean([f.mean for f in folds]))
    se = pooled.se / k
    flags: List[str] = []
    if pooled.zero_variance:
        flags.append("zero-variance")
        logger.warning("all folds have zero variance; df falls back to sum(n_i - 1)")
    if se > 0:
        t = mean / se
        p = _p_for(t, pooled.df, tail)
    elif mean == 0.0:
        t = 0.0
        p = 0.5 if tail is Tail.GREATER else 1.0
    else:
        t = float(np.copysign(np.inf, mean))
        p = _p_for(t, pooled.df, tail)
    half = float(sps.t.ppf(0.975, pooled.df)) * se
    return PooledStat(
        mean=mean,
        se=se,
        df=pooled.df,
        t=float(t),
        p=float(min(max(p, 0.0), 1.0)),
        tail=tail,
        ci_low=mean - half,
        ci_high=mean + half,
        k=k,
        flags=tuple(flags),
    )


def model_fit_test(per_fold_balanced_accuracy: Sequence[ArrayLike]) -> PooledStat:
    """One-sided test that logit balanced accuracy exceeds chance (logit 0.5 = 0)."""
    transformed = []
    clamped_any = False
    for values in per_fold_balanced_accuracy:
        _, clamped = clamp_probability(values)
        clamped_any |= bool(np.any(clamped))
        transformed.append(logit_transform(values))
    stat = pool_samples(transformed, tail=Tail.GREATER)
    if clamped_any:
        logger.warning("balanced accuracy at 0 or 1 was clamped before the logit transform")
        stat = replace(stat, flags=stat.flags + ("logit-clamped",))
    return stat


# ---------- Confidence ----------


@dataclass(frozen=True)
class ConfidenceRecord:
    predicted: int
    confidence: float
    votes: Tuple[int, ...]
    tie: bool = False
    subject_id: str = ""
    split: str = ""
    correct: Optional[bool] = None
    pooled: bool = False

    @property
    def n_draws(self) -> int:
        return int(sum(self.votes))

    def to_dict(self) -> Dict[str, object]:
        return {
            "subject_id": self.subject_id,
            "split": self.split,
            "predicted": self.predicted,
            "confidence": self.confidence,
            "correct": self.correct,
            "tie": self.tie,
            "votes": list(self.votes),
            "pooled": self.pooled,
        }


def prediction_confidence(votes: Sequence[int]) -> ConfidenceRecord:
    """Majority class and its vote fraction; ties go to class 0 and are flagged."""
    counts = np.asarray(votes, dtype=np.int64)
    total = int(counts.sum())
    if total <= 0:
        raise ArgumentError("no draws to vote with")
    best = int(np.argmax(counts))
    tie = int(np.sum(counts == counts[best])) > 1
    return ConfidenceRecord(
        predicted=best,
        confidence=float(counts[best]) / total,
        votes=tuple(int(c) for c in counts),
        tie=tie,
    )


def votes_from_probabilities(draws: ArrayLike, threshold: float = 0.5) -> np.ndarray:
    """S x n positive-class probabilities -> n x 2 vote counts (p >= threshold is class 1)."""
    arr = np.asarray(draws, dtype=np.float64)
    if arr.ndim != 2:
        raise ArgumentError("draws must be an S x n matrix")
    ones = np.sum(arr >= threshold, axis=0)
    return np.column_stack([arr.shape[0] - ones, ones]).astype(np.int64)


def pool_unseen_confidence(fold_votes: Sequence[Sequence[int]]) -> ConfidenceRecord:
    """Sum one subject's vote counts over folds, then take the vote confidence."""
    arr = np.asarray(fold_votes, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ArgumentError("expected one vote-count row per fold")
    totals = arr.sum(axis=1)
    if np.any(totals != totals[0]):
        raise ArgumentError(f"folds have different draw counts: {sorted(set(totals.tolist()))}")
    return replace(prediction_confidence(arr.sum(axis=0)), pooled=True)


@dataclass(frozen=True)
class CalibrationResult:
    mean_correct: float
    mean_incorrect: float
    difference: float
    p: float
    n_correct: int
    n_incorrect: int
    applicable: bool = True

    def to_dict(self) -> Dict[str, object]:
        def clean(v: float) -> Optional[float]:
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "mean_correct": clean(self.mean_correct),
            "mean_incorrect": clean(self.mean_incorrect),
            "difference": clean(self.difference),
            "p": clean(self.p),
            "n_correct": self.n_correct,
            "n_incorrect": self.n_incorrect,
            "applicable": self.applicable,
        }


def calibration_compare(
    confidences: ArrayLike, correct: Sequence[bool]
) -> CalibrationResult:
    """Welch two-sided t test of confidence, correct vs. incorrect predictions.

    Needs two predictions in each group; otherwise the result is marked not
    applicable and ``p`` is NaN (null in reports).
    """
    c = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=bool)
    good, bad = c[ok], c[~ok]
    mean_good = float(good.mean()) if good.size else float("nan")
    mean_bad = float(bad.mean()) if bad.size else float("nan")
    if good.size < 2 or bad.size < 2:
        logger.info(
            f"calibration test not applicable: {good.size} correct, "
            f"{bad.size} incorrect predictions"
        )
        return CalibrationResult(
            mean_correct=mean_good,
            mean_incorrect=mean_bad,
            difference=mean_good - mean_bad,
            p=float("nan"),
            n_correct=int(good.size),
            n_incorrect=int(bad.size),
            applicable=False,
        )
    diff = mean_good - mean_bad
    if good.var() == 0 and bad.var() == 0:
        p = 1.0 if diff == 0 else 0.0
    else:
        res = sps.ttest_ind(good, bad, equal_var=False)
        p = float(res.pvalue)
    return CalibrationResult(
        mean_correct=mean_good,
        mean_incorrect=mean_bad,
        difference=diff,
        p=p,
        n_correct=int(good.size),
        n_incorrect=int(bad.size),
    )
