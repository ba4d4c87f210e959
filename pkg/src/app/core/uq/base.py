"""
Posterior sampler contract.

Every uncertainty backend is trained once and then exposes ``draws`` weight
samples over the full ARMED parameter vector. ``draw(i)`` is a pure function
of the fitted state, the seed and ``i``; a fitted sampler is read-only and
may be shared between threads.
"""

import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional

import numpy as np

from app.core.armed import ArmedLayout, ArmedParams, mixed_forward, predict_unseen
from app.core.errors import ArgumentError
from app.core.nn import DropoutMask

logger = logging.getLogger(__name__)


class SamplerKind(str, Enum):
    BNN_VI = "bnn-vi"
    SWAG_DIAG = "swag-diag"
    SWAG_FULL = "swag-full"
    MC_DROPOUT = "mc-dropout"
    ENSEMBLE_INIT = "ensemble-init"
    ENSEMBLE_SUBSAMPLE = "ensemble-subsample"
    NONE = "none"


@dataclass(frozen=True, eq=False)
class PosteriorDraw:
    """One weight sample, optionally a thinned network."""

    params: ArmedParams
    fe_mask: Optional[DropoutMask] = None
    zpred_mask: Optional[DropoutMask] = None


class PosteriorSampler(ABC):
    """Fitted backend yielding ``draws`` exchangeable weight samples."""

    kind: SamplerKind

    def __init__(self, layout: ArmedLayout, draws: int, seed: int, fold: int = 0):
        if draws < 1:
            raise ArgumentError(f"draw count must be positive, got {draws}")
        self.layout = layout
        self.draws = int(draws)
        self.seed = int(seed)
        self.fold = int(fold)
        self.history: List[Any] = []

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.draws:
            raise ArgumentError(f"draw index {i} outside [0, {self.draws})")

    @abstractmethod
    def draw(self, i: int) -> PosteriorDraw:
        """Return weight sample ``i``."""

    def iter_draws(self) -> Iterator[PosteriorDraw]:
        for i in range(self.draws):
            yield self.draw(i)

    @abstractmethod
    def point(self) -> ArmedParams:
        """Central weights (posterior mean, or the single trained model)."""

    # -- persistence hooks --

    @abstractmethod
    def state(self) -> Dict[str, np.ndarray]:
        """Arrays needed to rebuild the sampler."""

    def metadata(self) -> Dict[str, Any]:
        """JSON-serializable settings needed to rebuild the sampler."""
        return {}

    @classmethod
    @abstractmethod
    def restore(
        cls,
        layout: ArmedLayout,
        header: Dict[str, Any],
        arrays: Dict[str, np.ndarray],
    ) -> "PosteriorSampler":
        """Inverse of ``state``/``metadata``."""

    def describe(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "draws": self.draws,
            "seed": self.seed,
            "fold": self.fold,
            **self.metadata(),
        }


class PointSampler(PosteriorSampler):
    """A single trained model viewed as a one-draw posterior."""

    kind = SamplerKind.NONE

    def __init__(self, params: ArmedParams, seed: int = 0, fold: int = 0):
        super().__init__(params.layout, 1, seed, fold)
        self.params = params

    def draw(self, i: int) -> PosteriorDraw:
        self._check_index(i)
        return PosteriorDraw(self.params)

    def point(self) -> ArmedParams:
        return self.params

    def state(self) -> Dict[str, np.ndarray]:
        return {"params": self.params.values}

    @classmethod
    def restore(cls, layout, header, arrays) -> "PointSampler":
        return cls(ArmedParams(arrays["params"], layout), header["seed"], header["fold"])


@dataclass
class PredictionDraws:
    """Per-draw predictions, shape S x n."""

    y_F: np.ndarray
    y_M: np.ndarray

    @property
    def draws(self) -> int:
        return int(self.y_F.shape[0])


def _predict_one(
    d: PosteriorDraw, x: np.ndarray, z: Optional[np.ndarray], fe_only: bool
) -> tuple:
    if z is None:
        pred = predict_unseen(d.params, x, fe_only, d.fe_mask, d.zpred_mask)
    else:
        pred = mixed_forward(d.params, x, z, d.fe_mask)
    return pred.y_F, pred.y_M


def posterior_predict(
    sampler: PosteriorSampler,
    x: np.ndarray,
    z: Optional[np.ndarray] = None,
    *,
    fe_only: bool = False,
    workers: int = 1,
) -> PredictionDraws:
    """One forward pass per draw.

    ``z=None`` means the rows come from unseen clusters: membership is taken
    from the Z-predictor (or ignored with ``fe_only``).
    """
    x = np.asarray(x, dtype=np.float64)
    if workers > 1 and sampler.draws > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(
                pool.map(
                    lambda i: _predict_one(sampler.draw(i), x, z, fe_only),
                    range(sampler.draws),
                )
            )
    else:
        outs = [_predict_one(d, x, z, fe_only) for d in sampler.iter_draws()]
    y_f = np.stack([o[0] for o in outs])
    y_m = np.stack([o[1] for o in outs])
    return PredictionDraws(y_f, y_m)
