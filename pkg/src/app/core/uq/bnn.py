"""
Mean-field variational Bayes on selected FE layers.

Each selected weight gets a Gaussian ``N(mu, sigma^2)`` with
``sigma = softplus(rho)``; everything else stays a point estimate. Training
minimizes the ARMED objective under one reparameterized weight draw per batch
plus ``kl_weight * KL(q || N(0, 1))``.
"""

import logging
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Optional

import numpy as np
from scipy.special import expit

from app.core import seeding
from app.core.armed import (
    ArmedLayout,
    ArmedParams,
    ArmedTrainer,
    LossBreakdown,
    LossWeights,
    TrainingConfig,
    armed_gradients,
    armed_loss,
    init_armed,
    train_zpredictor,
)
from app.core.config import settings
from app.core.nn import AdamState, adam_step
from app.core.uq.base import PosteriorDraw, PosteriorSampler, SamplerKind

if TYPE_CHECKING:
    from app.core.simdata import ClusteredDataset

logger = logging.getLogger(__name__)

SIGMA_INIT = 1e-3


class LayerSelection(str, Enum):
    FIRST = "first"
    LAST = "last"
    ALL = "all"


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_inverse(s: np.ndarray | float) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.log(np.expm1(s))


def kl_standard_normal(mu: np.ndarray, sigma: np.ndarray) -> float:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over weights."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return float(np.sum(np.log(1.0 / sigma) + (sigma**2 + mu**2 - 1.0) / 2.0))


def bayesian_indices(layout: ArmedLayout, selection: LayerSelection) -> np.ndarray:
    probe = ArmedParams(np.zeros(layout.size), layout)
    n_layers = len(layout.fe.layout())
    layers = {
        LayerSelection.FIRST: [0],
        LayerSelection.LAST: [n_layers - 1],
        LayerSelection.ALL: list(range(n_layers)),
    }[LayerSelection(selection)]
    return np.concatenate([probe.layer_indices("fe", i) for i in layers])


class BnnTrainer(ArmedTrainer):
    """ArmedTrainer whose main step optimizes (mu, rho) of the selected layers."""

    def __init__(
        self,
        layout: ArmedLayout,
        training: TrainingConfig,
        weights: LossWeights,
        *,
        seed: int,
        fold: int = 0,
        selection: LayerSelection = LayerSelection.ALL,
        n_train: int,
        sigma_init: float = SIGMA_INIT,
    ):
        super().__init__(layout, training, weights, seed=seed, fold=fold)
        self.selection = LayerSelection(selection)
        self.bayes_index = bayesian_indices(layout, self.selection)
        self._pos = np.searchsorted(self.main_index, self.bayes_index)
        self.rho = np.full(self.bayes_index.size, float(softplus_inverse(sigma_init)))
        self.kl_weight = weights.kl if weights.kl is not None else 1.0 / n_train
        self.sigma_floor = settings.SIGMA_FLOOR
        self._rho_floor = float(softplus_inverse(self.sigma_floor))
        self._main_state = AdamState.create(
            self.main_index.size + self.rho.size, self.lr
        )
        self._clamp_warned = False

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    def _clamp(self) -> None:
        low = self.rho < self._rho_floor
        if np.any(low):
            self.rho[low] = self._rho_floor
            if not self._clamp_warned:
                logger.warning(
                    f"fold {self.fold}: posterior sigma fell below {self.sigma_floor}; "
                    "clamped"
                )
                self._clamp_warned = True

    def main_step(
        self, values: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray
    ) -> np.ndarray:
        rng = seeding.stream(self.seed, seeding.WEIGHT_NOISE, self.fold, self.step)
        xi = rng.standard_normal(self.bayes_index.size)
        sigma = self.sigma
        mu = values[self.bayes_index]
        sampled = values.copy()
        sampled[self.bayes_index] = mu + sigma * xi
        _, grad = armed_gradients(
            ArmedParams(sampled, self.layout), x, y, z, self.weights
        )
        g_w = grad[self.bayes_index]
        g_main = grad[self.main_index].copy()
        g_main[self._pos] = g_w + self.kl_weight * mu
        g_rho = (g_w * xi + self.kl_weight * (sigma - 1.0 / sigma)) * expit(self.rho)

        theta = np.concatenate([values[self.main_index], self.rho])
        theta = adam_step(self._main_state, theta, np.concatenate([g_main, g_rho]))
        m = self.main_index.size
        out = values.copy()
        out[self.main_index] = theta[:m]
        self.rho = theta[m:].copy()
        self._clamp()
        self.step += 1
        return out

    def kl(self, values: np.ndarray) -> float:
        return kl_standard_normal(values[self.bayes_index], self.sigma)

    def evaluate(
        self, values: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray
    ) -> LossBreakdown:
        """Objective at the posterior mean plus the weighted KL (negative ELBO)."""
        base = armed_loss(ArmedParams(values, self.layout), x, y, z, self.weights)
        kl = self.kl(values)
        base.total += self.kl_weight * kl
        base.kl = kl
        return base


class BnnSampler(PosteriorSampler):
    kind = SamplerKind.BNN_VI

    def __init__(
        self,
        mean: ArmedParams,
        index: np.ndarray,
        sigma: np.ndarray,
        *,
        draws: int,
        seed: int,
        fold: int = 0,
        selection: LayerSelection = LayerSelection.ALL,
    ):
        super().__init__(mean.layout, draws, seed, fold)
        self.mean = mean
        self.index = np.asarray(index, dtype=np.int64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.selection = LayerSelection(selection)

    def draw(self, i: int) -> PosteriorDraw:
        self._check_index(i)
        rng = seeding.stream(self.seed, seeding.SAMPLING, self.fold, i)
        values = self.mean.values.copy()
        values[self.index] = values[self.index] + self.sigma * rng.standard_normal(
            self.index.size
        )
        return PosteriorDraw(ArmedParams(values, self.layout))

    def point(self) -> ArmedParams:
        return self.mean

    def state(self) -> Dict[str, np.ndarray]:
        return {"mean": self.mean.values, "index": self.index, "sigma": self.sigma}

    def metadata(self) -> Dict[str, Any]:
        return {"selection": self.selection.value}

    @classmethod
    def restore(cls, layout, header, arrays) -> "BnnSampler":
        return cls(
            ArmedParams(arrays["mean"], layout),
            arrays["index"],
            arrays["sigma"],
            draws=header["draws"],
            seed=header["seed"],
            fold=header["fold"],
            selection=header["selection"],
        )


def fit_bnn(
    data: "ClusteredDataset",
    training: TrainingConfig,
    weights: LossWeights,
    *,
    selection: LayerSelection = LayerSelection.ALL,
    seed: int,
    fold: int = 0,
    draws: int = 30,
    init: Optional[ArmedParams] = None,
) -> BnnSampler:
    """Variational training from the shared init, then a Z-predictor fit."""
    layout = ArmedLayout.from_training(data.n_features, data.Z.shape[1], training)
    params = init if init is not None else init_armed(layout, seed, fold)
    trainer = BnnTrainer(
        layout,
        training,
        weights,
        seed=seed,
        fold=fold,
        selection=selection,
        n_train=data.n_samples,
    )
    fit = trainer.fit(params, data.X, data.y, data.Z)
    zp = train_zpredictor(fit.params, data.X, data.Z, training, seed=seed, fold=fold)
    mean = fit.params.replace("zpred", zp)
    sampler = BnnSampler(
        mean,
        trainer.bayes_index,
        trainer.sigma,
        draws=draws,
        seed=seed,
        fold=fold,
        selection=selection,
    )
    sampler.history = list(fit.history)
    logger.info(
        f"fold {fold}: BNN-VI ({trainer.selection.value}) trained, "
        f"mean sigma={float(np.mean(trainer.sigma)):.2e}"
    )
    return sampler
