"""
Posterior samplers over ARMED weights.

Each backend module exposes a ``fit_*`` function returning a fitted
:class:`~app.core.uq.base.PosteriorSampler`.
"""

from app.core.uq.base import (
    PointSampler,
    PosteriorDraw,
    PosteriorSampler,
    PredictionDraws,
    SamplerKind,
    posterior_predict,
)
from app.core.uq.bnn import BnnSampler, LayerSelection, fit_bnn
from app.core.uq.dropout import DropoutSampler, fit_mc_dropout
from app.core.uq.ensemble import EnsembleSampler, Perturbation, fit_ensemble
from app.core.uq.persistence import load_sampler, save_sampler
from app.core.uq.swag import SwagSampler, fit_swag

__all__ = [
    "BnnSampler",
    "DropoutSampler",
    "EnsembleSampler",
    "LayerSelection",
    "Perturbation",
    "PointSampler",
    "PosteriorDraw",
    "PosteriorSampler",
    "PredictionDraws",
    "SamplerKind",
    "SwagSampler",
    "fit_bnn",
    "fit_ensemble",
    "fit_mc_dropout",
    "fit_swag",
    "load_sampler",
    "posterior_predict",
    "save_sampler",
]
