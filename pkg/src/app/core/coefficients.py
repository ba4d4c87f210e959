"""
Gradient-based covariate coefficients.

For every posterior draw the derivative of a model output with respect to
each input feature is reduced to one number per feature, either as the mean
of per-sample gradients or as the gradient at the mean input. The draws of
every fold are then pooled with a two-sided Satterthwaite t test against
zero and the features ranked by the size of their pooled effect.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.core import nn
from app.core.armed import ArmedParams, re_effects
from app.core.errors import ArgumentError, ConfigurationError
from app.core.stats import PooledStat, Tail, pool_samples
from app.core.uq.base import PosteriorDraw, PosteriorSampler

if TYPE_CHECKING:
    from app.core.simdata import ClusteredDataset

logger = logging.getLogger(__name__)


class EffectKind(str, Enum):
    FIXED = "fixed"
    MIXED = "mixed"
    RANDOM = "random"


class Averaging(str, Enum):
    PER_SAMPLE_MEAN = "per-sample-mean"
    GRADIENT_AT_MEAN = "gradient-at-mean"


@dataclass(frozen=True)
class CovariateCoefficient:
    feature: str
    index: int
    kind: EffectKind
    averaging: Averaging
    values: Tuple[np.ndarray, ...]  # one array of S draw values per fold
    stat: Optional[PooledStat]
    rank: int
    probe: bool = False

    @property
    def mean(self) -> float:
        if self.stat is not None:
            return self.stat.mean
        return float(np.mean([v.mean() for v in self.values]))

    def to_dict(self) -> Dict[str, object]:
        return {
            "feature": self.feature,
            "index": self.index,
            "kind": self.kind.value,
            "averaging": self.averaging.value,
            "coef": self.mean,
            "se": None if self.stat is None else self.stat.se,
            "df": None if self.stat is None else self.stat.df,
            "p": None if self.stat is None else self.stat.p,
            "rank": self.rank,
            "probe": self.probe,
        }


def random_effect_jacobian(params: ArmedParams, z: np.ndarray) -> np.ndarray:
    """Full ``dh_R/dx`` per sample, shape n x d x d (diagonal ``1 + u(z)``)."""
    u, _ = re_effects(params, z)
    n, d = u.shape
    jac = np.zeros((n, d, d))
    jac[:, np.arange(d), np.arange(d)] = 1.0 + u
    return jac


def _membership(
    draw: PosteriorDraw, x: np.ndarray, z: Optional[np.ndarray]
) -> np.ndarray:
    """Cluster membership used for the mixed path.

    Rows without a seen cluster (all-zero z, or ``z=None``) take the
    Z-predictor's soft membership, held fixed for differentiation.
    """
    soft = nn.forward(draw.params.zpred, x, draw.zpred_mask)
    if z is None:
        return soft
    z = np.asarray(z, dtype=np.float64)
    unseen = z.sum(axis=1) == 0
    if not np.any(unseen):
        return z
    out = z.copy()
    out[unseen] = soft[unseen]
    return out


def _mixed_gradient(
    draw: PosteriorDraw, x: np.ndarray, z: np.ndarray, target: str
) -> np.ndarray:
    u, u0 = re_effects(draw.params, z)
    scale = 1.0 + u
    h = x * scale
    g_h = nn.input_gradient(draw.params.fe, h, "logit", mask=draw.fe_mask)
    grad = g_h * scale
    if target == "probability":
        p = expit(nn.logits(draw.params.fe, h, draw.fe_mask)[:, 0] + u0)
        grad = grad * (p * (1.0 - p))[:, None]
    return grad


def per_sample_gradients(
    draw: PosteriorDraw,
    x: np.ndarray,
    z: Optional[np.ndarray],
    kind: EffectKind,
    target: str = "logit",
) -> np.ndarray:
    """n x d derivatives of the chosen output for one draw."""
    x = np.asarray(x, dtype=np.float64)
    kind = EffectKind(kind)
    if target not in ("logit", "probability"):
        raise ArgumentError(f"unknown gradient target '{target}'")
    if kind is EffectKind.FIXED:
        return nn.input_gradient(draw.params.fe, x, target, mask=draw.fe_mask)
    if kind is EffectKind.RANDOM:
        if z is None or np.any(np.asarray(z).sum(axis=1) == 0):
            raise ArgumentError(
                "random-effect coefficients need seen-cluster membership for every row"
            )
        u, _ = re_effects(draw.params, z)
        return 1.0 + u
    return _mixed_gradient(draw, x, _membership(draw, x, z), target)


def draw_coefficients(
    sampler: PosteriorSampler,
    x: np.ndarray,
    z: Optional[np.ndarray],
    kind: EffectKind,
    averaging: Averaging,
    target: str = "logit",
) -> np.ndarray:
    """S x d matrix: one coefficient vector per posterior draw."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError("coefficients need a non-empty n x d evaluation set")
    averaging = Averaging(averaging)
    if averaging is Averaging.GRADIENT_AT_MEAN:
        x_eval = x.mean(axis=0, keepdims=True)
        z_eval = None if z is None else np.asarray(z, dtype=np.float64).mean(
            axis=0, keepdims=True
        )
    else:
        x_eval, z_eval = x, z
    rows = []
    for draw in sampler.iter_draws():
        g = per_sample_gradients(draw, x_eval, z_eval, kind, target)
        rows.append(g.mean(axis=0))
    return np.vstack(rows)


def rank_by_magnitude(values: Sequence[float]) -> np.ndarray:
    """1-based ranks by descending ``|value|``, ties by feature order."""
    mags = np.abs(np.asarray(values, dtype=np.float64))
    order = np.lexsort((np.arange(mags.size), -mags))
    ranks = np.empty(mags.size, dtype=np.int64)
    ranks[order] = np.arange(1, mags.size + 1)
    return ranks


def covariate_coefficients(
    fold_models: Sequence[Tuple[PosteriorSampler, "ClusteredDataset"]],
    kind: EffectKind = EffectKind.FIXED,
    averaging: Averaging = Averaging.PER_SAMPLE_MEAN,
    target: str = "logit",
) -> List[CovariateCoefficient]:
    """Pooled coefficient, SE, two-sided p and rank for every feature.

    ``fold_models`` pairs each fold's fitted sampler with the set the
    gradients are evaluated on (the fold's training set by default).
    Single-draw samplers yield coefficients without a test.

    Returns:
        One record per feature, in feature order.
    """
    if not fold_models:
        raise ArgumentError("no folds to pool")
    kind, averaging = EffectKind(kind), Averaging(averaging)
    first = fold_models[0][1]
    names = list(first.feature_names)
    probes = set(first.probe_columns)
    per_fold: List[np.ndarray] = []
    for sampler, data in fold_models:
        if data.n_features != len(names):
            raise ConfigurationError(
                f"fold data has {data.n_features} features, expected {len(names)}"
            )
        per_fold.append(draw_coefficients(sampler, data.X, data.Z, kind, averaging, target))

    testable = all(v.shape[0] >= 2 for v in per_fold)
    stats: List[Optional[PooledStat]] = []
    means = []
    for j in range(len(names)):
        samples = [v[:, j] for v in per_fold]
        if testable:
            stat = pool_samples(samples, tail=Tail.TWO_SIDED)
            stats.append(stat)
            means.append(stat.mean)
        else:
            stats.append(None)
            means.append(float(np.mean([s.mean() for s in samples])))
    if not testable:
        logger.info(f"{kind.value} coefficients from single-draw models carry no p-values")
    ranks = rank_by_magnitude(means)
    return [
        CovariateCoefficient(
            feature=names[j],
            index=j,
            kind=kind,
            averaging=averaging,
            values=tuple(v[:, j].copy() for v in per_fold),
            stat=stats[j],
            rank=int(ranks[j]),
            probe=j in probes,
        )
        for j in range(len(names))
    ]
