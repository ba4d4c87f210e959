"""
Monte Carlo dropout.

The model is trained with dropout and keeps it at inference: each posterior
draw is one set of unit masks, generated from ``(seed, draw index)`` and
shared by every row of the evaluated batch.
"""

import logging
from typing import TYPE_CHECKING, Any, Dict, Optional

import numpy as np

from app.core import seeding
from app.core.armed import (
    ArmedParams,
    DropoutScope,
    LossWeights,
    TrainingConfig,
    train_armed,
)
from app.core.errors import ArgumentError
from app.core.nn import DropoutMask
from app.core.uq.base import PosteriorDraw, PosteriorSampler, SamplerKind

if TYPE_CHECKING:
    from app.core.simdata import ClusteredDataset

logger = logging.getLogger(__name__)

DROPOUT_RATES = (0.1, 0.2, 0.3, 0.4, 0.5)


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")


class DropoutSampler(PosteriorSampler):
    kind = SamplerKind.MC_DROPOUT

    def __init__(
        self,
        params: ArmedParams,
        rate: float,
        *,
        draws: int,
        seed: int,
        fold: int = 0,
        scope: DropoutScope = DropoutScope.FE,
    ):
        _check_rate(rate)
        super().__init__(params.layout, draws, seed, fold)
        self.params = params
        self.rate = float(rate)
        self.scope = DropoutScope(scope)
        self._mask_seed = seeding.derive_seed(seed, seeding.DROPOUT, fold)

    def masks(self, i: int) -> tuple:
        fe_widths = list(self.layout.fe.hidden)
        fe_mask = (
            DropoutMask.generate(self.rate, fe_widths, self._mask_seed, i)
            if fe_widths
            else None
        )
        zpred_mask = None
        zp_widths = list(self.layout.zpred.hidden)
        if self.scope is DropoutScope.ALL and zp_widths:
            zpred_mask = DropoutMask.generate(
                self.rate, zp_widths, self._mask_seed + 1, i
            )
        return fe_mask, zpred_mask

    def draw(self, i: int) -> PosteriorDraw:
        self._check_index(i)
        fe_mask, zpred_mask = self.masks(i)
        return PosteriorDraw(self.params, fe_mask, zpred_mask)

    def point(self) -> ArmedParams:
        return self.params

    def state(self) -> Dict[str, np.ndarray]:
        return {"params": self.params.values}

    def metadata(self) -> Dict[str, Any]:
        return {"rate": self.rate, "scope": self.scope.value}

    @classmethod
    def restore(cls, layout, header, arrays) -> "DropoutSampler":
        return cls(
            ArmedParams(arrays["params"], layout),
            header["rate"],
            draws=header["draws"],
            seed=header["seed"],
            fold=header["fold"],
            scope=header["scope"],
        )


def fit_mc_dropout(
    data: "ClusteredDataset",
    training: TrainingConfig,
    weights: LossWeights,
    *,
    rate: float,
    seed: int,
    fold: int = 0,
    draws: int = 30,
    scope: DropoutScope = DropoutScope.FE,
    init: Optional[ArmedParams] = None,
) -> DropoutSampler:
    """Train with dropout at ``rate`` from the shared init."""
    _check_rate(rate)
    fit = train_armed(
        data,
        training,
        weights,
        seed=seed,
        fold=fold,
        init=init,
        dropout_rate=rate,
        dropout_scope=scope,
    )
    sampler = DropoutSampler(fit.params, rate, draws=draws, seed=seed, fold=fold, scope=scope)
    sampler.history = list(fit.history)
    logger.info(f"fold {fold}: MC dropout trained at rate {rate} (scope {sampler.scope.value})")
    return sampler
