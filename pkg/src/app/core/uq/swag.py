"""
SWAG: a Gaussian fitted to constant-learning-rate SGD iterates.

After the model has converged with Adam, training continues with plain SGD
at a fixed learning rate for ``K`` epochs; one iterate is collected per
epoch. The diagonal variant samples ``mean + sqrt(var) * xi``; the full
variant adds a low-rank term built from the last ``K - 1`` deviations and
halves both parts.
"""

import logging
from collections import deque
from typing import TYPE_CHECKING, Any, Deque, Dict, Optional

import numpy as np

from app.core import seeding
from app.core.armed import (
    ArmedFit,
    ArmedLayout,
    ArmedParams,
    ArmedTrainer,
    LossWeights,
    TrainingConfig,
    train_armed,
)
from app.core.config import settings
from app.core.errors import ArgumentError, SwagDivergenceError, TrainingError
from app.core.uq.base import PosteriorDraw, PosteriorSampler, SamplerKind

if TYPE_CHECKING:
    from app.core.simdata import ClusteredDataset

logger = logging.getLogger(__name__)

SWAG_LRS = (1e-1, 1e-2, 1e-3, 1e-4)

# Collection epochs continue the same batch streams under a new phase key.
COLLECTION_PHASE = 1


class SwagMoments:
    """Running first and second moments of collected iterates."""

    def __init__(self, size: int, max_columns: int):
        self.n = 0
        self.mean = np.zeros(size)
        self.sq_mean = np.zeros(size)
        self._recent: Deque[np.ndarray] = deque(maxlen=max(max_columns, 0))

    def collect(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        n = self.n
        self.mean = self.mean * n / (n + 1.0) + theta / (n + 1.0)
        self.sq_mean = self.sq_mean * n / (n + 1.0) + theta**2 / (n + 1.0)
        if self._recent.maxlen:
            self._recent.append(theta.copy())
        self.n += 1

    @property
    def variance(self) -> np.ndarray:
        return np.maximum(self.sq_mean - self.mean**2, 0.0)

    def deviations(self) -> np.ndarray:
        """Columns ``theta_i - mean`` for the most recent iterates (size x cols)."""
        if not self._recent:
            return np.zeros((self.mean.size, 0))
        return np.column_stack([t - self.mean for t in self._recent])


class SwagSampler(PosteriorSampler):
    def __init__(
        self,
        layout: ArmedLayout,
        mean: np.ndarray,
        sq_mean: np.ndarray,
        deviations: Optional[np.ndarray],
        *,
        lr: float,
        n_collected: int,
        draws: int,
        seed: int,
        fold: int = 0,
    ):
        super().__init__(layout, draws, seed, fold)
        self.kind = SamplerKind.SWAG_FULL if deviations is not None else SamplerKind.SWAG_DIAG
        self.mean = np.asarray(mean, dtype=np.float64)
        self.sq_mean = np.asarray(sq_mean, dtype=np.float64)
        self.deviations = None if deviations is None else np.asarray(deviations, dtype=np.float64)
        self.lr = float(lr)
        self.n_collected = int(n_collected)

    @property
    def variance(self) -> np.ndarray:
        return np.maximum(self.sq_mean - self.mean**2, 0.0)

    def draw(self, i: int) -> PosteriorDraw:
        self._check_index(i)
        rng = seeding.stream(self.seed, seeding.SAMPLING, self.fold, i)
        std = np.sqrt(self.variance)
        xi = rng.standard_normal(self.mean.size)
        if self.deviations is None:
            theta = self.mean + std * xi
        else:
            theta = self.mean + std * xi / np.sqrt(2.0)
            cols = self.deviations.shape[1]
            if cols:
                xi2 = rng.standard_normal(cols)
                theta = theta + self.deviations @ xi2 / np.sqrt(2.0 * cols)
        return PosteriorDraw(ArmedParams(theta, self.layout))

    def point(self) -> ArmedParams:
        return ArmedParams(self.mean, self.layout)

    def state(self) -> Dict[str, np.ndarray]:
        out = {"mean": self.mean, "sq_mean": self.sq_mean}
        if self.deviations is not None:
            out["deviations"] = self.deviations
        return out

    def metadata(self) -> Dict[str, Any]:
        return {"lr": self.lr, "n_collected": self.n_collected}

    @classmethod
    def restore(cls, layout, header, arrays) -> "SwagSampler":
        return cls(
            layout,
            arrays["mean"],
            arrays["sq_mean"],
            arrays.get("deviations"),
            lr=header["lr"],
            n_collected=header["n_collected"],
            draws=header["draws"],
            seed=header["seed"],
            fold=header["fold"],
        )


def fit_swag(
    data: "ClusteredDataset",
    training: TrainingConfig,
    weights: LossWeights,
    *,
    lr: float,
    full: bool = False,
    seed: int,
    fold: int = 0,
    draws: int = 30,
    collect_epochs: Optional[int] = None,
    pretrained: Optional[ArmedFit] = None,
    init: Optional[ArmedParams] = None,
) -> SwagSampler:
    """Collect SGD iterates around a converged ARMED model.

    ``pretrained`` lets the caller reuse an already converged model (the
    non-UQ baseline trained from the same shared init).
    """
    if lr <= 0:
        raise ArgumentError(f"SWAG learning rate must be positive, got {lr}")
    k = settings.SWAG_COLLECTION_EPOCHS if collect_epochs is None else collect_epochs
    if k < 1:
        raise ArgumentError("SWAG needs at least one collection epoch")
    base = pretrained or train_armed(data, training, weights, seed=seed, fold=fold, init=init)
    layout = base.params.layout
    moments = SwagMoments(layout.size, k - 1 if full else 0)
    trainer = ArmedTrainer(
        layout,
        training,
        weights,
        seed=seed,
        fold=fold,
        phase=COLLECTION_PHASE,
        optimizer="sgd",
        lr=lr,
    )
    try:
        trainer.fit(
            base.params,
            data.X,
            data.y,
            data.Z,
            epochs=k,
            on_epoch_end=lambda _epoch, p: moments.collect(p.values),
        )
    except TrainingError as e:
        logger.error(f"fold {fold}: SWAG collection diverged at lr={lr}")
        raise SwagDivergenceError(lr, e.epoch) from e
    sampler = SwagSampler(
        layout,
        moments.mean,
        moments.sq_mean,
        moments.deviations() if full else None,
        lr=lr,
        n_collected=moments.n,
        draws=draws,
        seed=seed,
        fold=fold,
    )
    sampler.history = list(base.history)
    logger.info(
        f"fold {fold}: {sampler.kind.value} collected {moments.n} iterates at lr={lr}"
    )
    return sampler
