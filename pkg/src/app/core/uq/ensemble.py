"""
Deep ensembles.

``S`` ARMED models trained independently, either from different random
initializations on all the data, or from the shared initialization on
cluster-stratified random subsets. Each member is one posterior draw.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Optional

import numpy as np

from app.core import seeding
from app.core.armed import (
    ArmedLayout,
    ArmedParams,
    LossWeights,
    TrainingConfig,
    init_armed,
    train_armed,
)
from app.core.errors import ArgumentError, DataError
from app.core.uq.base import PosteriorDraw, PosteriorSampler, SamplerKind

if TYPE_CHECKING:
    from app.core.simdata import ClusteredDataset

logger = logging.getLogger(__name__)

ENSEMBLE_FRACTIONS = (0.7, 0.8, 0.9)


class Perturbation(str, Enum):
    RANDOM_INIT = "random-init"
    SUBSAMPLE = "subsample"


def subsample_size(n: int, fraction: float) -> int:
    # round first so 0.7 * 100 counts as 70, not 71
    return int(math.ceil(round(fraction * n, 9)))


def stratified_subsample(
    cluster_ids: np.ndarray, fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``ceil(fraction * n)`` rows without replacement, every cluster kept.

    Per-cluster quotas follow cluster size (largest remainder), with at least
    one row per cluster. Refuses subsamples smaller than two rows per cluster.
    Returns sorted row indices.
    """
    if not 0.0 < fraction <= 1.0:
        raise ArgumentError(f"subsample fraction must be in (0, 1], got {fraction}")
    cluster_ids = np.asarray(cluster_ids)
    n = cluster_ids.size
    clusters, sizes = np.unique(cluster_ids, return_counts=True)
    total = subsample_size(n, fraction)
    if total < 2 * clusters.size:
        raise DataError(
            f"subsample of {total} rows is too small to stratify {clusters.size} "
            f"clusters (needs at least {2 * clusters.size})"
        )
    share = total * sizes / n
    quota = np.minimum(np.maximum(np.floor(share).astype(np.int64), 1), sizes)
    # largest fractional share first, ties by cluster order
    order = np.lexsort((np.arange(clusters.size), -(share - np.floor(share))))
    deficit = total - int(quota.sum())
    while deficit > 0:
        for c in order:
            if deficit == 0:
                break
            if quota[c] < sizes[c]:
                quota[c] += 1
                deficit -= 1
    while deficit < 0:
        over = np.flatnonzero(quota > 1)
        quota[over[np.argmax(quota[over])]] -= 1
        deficit += 1
    chosen = [
        rng.choice(np.flatnonzero(cluster_ids == c), size=int(q), replace=False)
        for c, q in zip(clusters, quota)
    ]
    return np.sort(np.concatenate(chosen))


class EnsembleSampler(PosteriorSampler):
    def __init__(
        self,
        members: List[ArmedParams],
        perturbation: Perturbation,
        *,
        fraction: float = 1.0,
        subsets: Optional[List[np.ndarray]] = None,
        seed: int,
        fold: int = 0,
    ):
        if not members:
            raise ArgumentError("an ensemble needs at least one member")
        super().__init__(members[0].layout, len(members), seed, fold)
        self.perturbation = Perturbation(perturbation)
        self.kind = (
            SamplerKind.ENSEMBLE_INIT
            if self.perturbation is Perturbation.RANDOM_INIT
            else SamplerKind.ENSEMBLE_SUBSAMPLE
        )
        self.members = members
        self.fraction = float(fraction)
        self.subsets = subsets or []

    def draw(self, i: int) -> PosteriorDraw:
        self._check_index(i)
        return PosteriorDraw(self.members[i])

    def point(self) -> ArmedParams:
        stacked = np.stack([m.values for m in self.members])
        return ArmedParams(stacked.mean(axis=0), self.layout)

    def state(self) -> Dict[str, np.ndarray]:
        out = {"members": np.stack([m.values for m in self.members])}
        for i, s in enumerate(self.subsets):
            out[f"subset_{i}"] = s
        return out

    def metadata(self) -> Dict[str, Any]:
        return {
            "perturbation": self.perturbation.value,
            "fraction": self.fraction,
            "n_subsets": len(self.subsets),
        }

    @classmethod
    def restore(cls, layout: ArmedLayout, header, arrays) -> "EnsembleSampler":
        members = [ArmedParams(v, layout) for v in arrays["members"]]
        subsets = [arrays[f"subset_{i}"] for i in range(header["n_subsets"])]
        return cls(
            members,
            header["perturbation"],
            fraction=header["fraction"],
            subsets=subsets,
            seed=header["seed"],
            fold=header["fold"],
        )


def fit_ensemble(
    data: "ClusteredDataset",
    training: TrainingConfig,
    weights: LossWeights,
    *,
    perturbation: Perturbation,
    fraction: float = 1.0,
    seed: int,
    fold: int = 0,
    draws: int = 30,
    init: Optional[ArmedParams] = None,
    workers: int = 1,
) -> EnsembleSampler:
    """Train ``draws`` independent members; ``workers > 1`` uses a thread pool."""
    perturbation = Perturbation(perturbation)
    if draws < 1:
        raise ArgumentError(f"draw count must be positive, got {draws}")
    layout = ArmedLayout.from_training(data.n_features, data.Z.shape[1], training)
    shared = init if init is not None else init_armed(layout, seed, fold)

    subsets: List[np.ndarray] = []
    if perturbation is Perturbation.SUBSAMPLE:
        subsets = [
            stratified_subsample(
                data.cluster_ids, fraction, seeding.stream(seed, seeding.SUBSAMPLE, fold, m)
            )
            for m in range(draws)
        ]

    def train_member(m: int) -> ArmedParams:
        if perturbation is Perturbation.RANDOM_INIT:
            member_data, member_init = data, init_armed(layout, seed, fold, member=m)
        else:
            member_data, member_init = data.subset(subsets[m]), shared
        fit = train_armed(
            member_data,
            training,
            weights,
            seed=seed,
            fold=fold,
            phase=m,
            init=member_init,
        )
        logger.debug(f"fold {fold}: ensemble member {m} trained on {member_data.n_samples} rows")
        return fit.params

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(train_member, range(draws)))
    else:
        members = [train_member(m) for m in range(draws)]

    logger.info(
        f"fold {fold}: ensemble ({perturbation.value}, fraction {fraction}) "
        f"trained {len(members)} members"
    )
    return EnsembleSampler(
        members,
        perturbation,
        fraction=fraction if perturbation is Perturbation.SUBSAMPLE else 1.0,
        subsets=subsets,
        seed=seed,
        fold=fold,
    )
