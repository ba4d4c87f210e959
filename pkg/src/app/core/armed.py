"""
ARMED mixed-effects model.

Four subnetworks live in one flat parameter vector so that every posterior
backend can treat the whole model uniformly:

- ``fe``: fixed-effects MLP, x -> y_F (sigmoid head)
- ``adv``: adversary, FE penultimate activations -> softmax over seen clusters
- ``re``: linear random-effects map, z -> (per-feature slope u(z), intercept u0(z))
- ``zpred``: cluster-membership classifier, x -> soft z for unseen clusters

The mixed prediction modulates the input, ``h_R = x * (1 + u(z))``, and adds
the intercept on the logit scale, ``eta_M = fe_logit(h_R) + u0(z)``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from app.core import nn, seeding
from app.core.config import settings
from app.core.errors import (
    ArgumentError,
    ConfigurationError,
    NumericError,
    TrainingError,
)
from app.core.nn import Activation, NetworkSpec, ParamVector

if TYPE_CHECKING:
    from app.core.simdata import ClusteredDataset

logger = logging.getLogger(__name__)

SEGMENTS = ("fe", "adv", "re", "zpred")


class AlternationMode(str, Enum):
    EPOCH = "epoch"
    BATCH = "batch"


class DropoutScope(str, Enum):
    FE = "fe"
    ALL = "all"


class LossWeights(BaseModel):
    """Weights of the terms in the main ARMED objective."""

    model_config = ConfigDict(frozen=True)

    fe: float = Field(1.0, gt=0, description="lambda_F, FE binary cross-entropy")
    me: float = Field(1.0, gt=0, description="lambda_M, mixed binary cross-entropy")
    adversary: float = Field(0.1, ge=0, description="lambda_A, adversarial penalty")
    kl: Optional[float] = Field(
        None, ge=0, description="lambda_K for BNN-VI; None means 1/n_train"
    )
    re_penalty: float = Field(1e-2, ge=0, description="shrinkage on RE weights")


class TrainingConfig(BaseModel):
    """Optimizer and architecture settings shared by every backend."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default_factory=lambda: settings.DEFAULT_EPOCHS, ge=0)
    lr: float = Field(default_factory=lambda: settings.DEFAULT_LR, gt=0)
    batch_size: int = Field(default_factory=lambda: settings.DEFAULT_BATCH_SIZE, ge=1)
    zpred_epochs: Optional[int] = Field(None, ge=0)
    alternation: AlternationMode = AlternationMode.EPOCH
    fe_hidden: Tuple[int, ...] = (4, 4, 4, 4)
    adversary_hidden: Tuple[int, ...] = ()
    zpred_hidden: Tuple[int, ...] = ()
    hidden_activation: Activation = Activation.RELU


# ---------- Layout and parameters ----------


@dataclass(frozen=True)
class ArmedLayout:
    n_features: int
    n_clusters: int
    fe: NetworkSpec
    adv: NetworkSpec
    re: NetworkSpec
    zpred: NetworkSpec

    @classmethod
    def build(
        cls,
        n_features: int,
        n_clusters: int,
        fe_hidden: Sequence[int] = (4, 4, 4, 4),
        adversary_hidden: Sequence[int] = (),
        zpred_hidden: Sequence[int] = (),
        hidden_activation: Activation = Activation.RELU,
    ) -> "ArmedLayout":
        if n_clusters < 1:
            raise ConfigurationError("at least one seen cluster is required")
        fe = NetworkSpec(
            n_features, tuple(fe_hidden), 1, hidden_activation, Activation.SIGMOID
        )
        adv = NetworkSpec(
            fe.penultimate_width,
            tuple(adversary_hidden),
            n_clusters,
            hidden_activation,
            Activation.SOFTMAX,
        )
        re = NetworkSpec(
            n_clusters, (), n_features + 1, Activation.IDENTITY, Activation.IDENTITY
        )
        zpred = NetworkSpec(
            n_features,
            tuple(zpred_hidden),
            n_clusters,
            hidden_activation,
            Activation.SOFTMAX,
        )
        return cls(n_features, n_clusters, fe, adv, re, zpred)

    @classmethod
    def from_training(
        cls, n_features: int, n_clusters: int, training: TrainingConfig
    ) -> "ArmedLayout":
        return cls.build(
            n_features,
            n_clusters,
            training.fe_hidden,
            training.adversary_hidden,
            training.zpred_hidden,
            training.hidden_activation,
        )

    def spec(self, name: str) -> NetworkSpec:
        if name not in SEGMENTS:
            raise ArgumentError(f"unknown segment '{name}'")
        return getattr(self, name)

    @cached_property
    def _slices(self) -> Dict[str, slice]:
        out: Dict[str, slice] = {}
        pos = 0
        for seg in SEGMENTS:
            size = nn.layout_size(self.spec(seg).layout())
            out[seg] = slice(pos, pos + size)
            pos += size
        return out

    def segment_slice(self, name: str) -> slice:
        if name not in self._slices:
            raise ArgumentError(f"unknown segment '{name}'")
        return self._slices[name]

    @property
    def size(self) -> int:
        return self._slices[SEGMENTS[-1]].stop

    def to_dict(self) -> Dict[str, object]:
        return {
            "n_features": self.n_features,
            "n_clusters": self.n_clusters,
            "fe_hidden": list(self.fe.hidden),
            "adversary_hidden": list(self.adv.hidden),
            "zpred_hidden": list(self.zpred.hidden),
            "hidden_activation": self.fe.hidden_activation.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ArmedLayout":
        return cls.build(
            int(data["n_features"]),
            int(data["n_clusters"]),
            tuple(data["fe_hidden"]),
            tuple(data["adversary_hidden"]),
            tuple(data["zpred_hidden"]),
            Activation(str(data["hidden_activation"])),
        )


@dataclass(frozen=True, eq=False)
class ArmedParams:
    """All ARMED weights as one flat vector with named segment views."""

    values: np.ndarray
    layout: ArmedLayout

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.layout.size:
            raise ConfigurationError(
                f"ARMED parameter vector has length {values.shape}, "
                f"layout needs {self.layout.size}"
            )
        object.__setattr__(self, "values", values)

    def segment(self, name: str) -> ParamVector:
        sl = self.layout.segment_slice(name)
        return ParamVector(self.values[sl], self.layout.spec(name).layout())

    @property
    def fe(self) -> ParamVector:
        return self.segment("fe")

    @property
    def adv(self) -> ParamVector:
        return self.segment("adv")

    @property
    def re(self) -> ParamVector:
        return self.segment("re")

    @property
    def zpred(self) -> ParamVector:
        return self.segment("zpred")

    def with_values(self, values: np.ndarray) -> "ArmedParams":
        return ArmedParams(values, self.layout)

    def copy(self) -> "ArmedParams":
        return ArmedParams(self.values.copy(), self.layout)

    def replace(self, name: str, part: ParamVector) -> "ArmedParams":
        values = self.values.copy()
        values[self.layout.segment_slice(name)] = part.values
        return ArmedParams(values, self.layout)

    def indices(self, *names: str) -> np.ndarray:
        return np.concatenate(
            [np.arange(s.start, s.stop) for s in map(self.layout.segment_slice, names)]
        )

    def re_weight_indices(self) -> np.ndarray:
        base = self.layout.segment_slice("re").start
        w, _ = ParamVector.zeros(self.layout.re.layout()).offsets()[0]
        return np.arange(base + w.start, base + w.stop)

    def layer_indices(self, name: str, layer: int) -> np.ndarray:
        base = self.layout.segment_slice(name).start
        sl = ParamVector.zeros(self.layout.spec(name).layout()).layer_slice(layer)
        return np.arange(base + sl.start, base + sl.stop)


def init_armed(
    layout: ArmedLayout, seed: int, fold: int = 0, member: Optional[int] = None
) -> ArmedParams:
    """Deterministic initialization for ``(seed, fold)``.

    Every backend that shares an init calls this with the same arguments and
    gets bit-identical weights. ``member`` gives a fresh init per ensemble
    member. RE weights start at zero, the Z-predictor head at zero (uniform).
    """
    keys = (fold,) if member is None else (fold, member)
    rng = seeding.stream(seed, seeding.INIT, *keys)
    parts = [
        layout.fe.init(rng),
        layout.adv.init(rng),
        ParamVector.zeros(layout.re.layout()),
        layout.zpred.init(rng, zero_head=True),
    ]
    return ArmedParams(np.concatenate([p.values for p in parts]), layout)


# ---------- Forward passes ----------


@dataclass
class MixedPrediction:
    y_F: np.ndarray
    y_M: np.ndarray
    h_R: np.ndarray
    z_used: np.ndarray
    eta_F: np.ndarray
    eta_M: np.ndarray


def _check_z(p: ArmedParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != p.layout.n_clusters:
        raise ConfigurationError(
            f"cluster membership has shape {z.shape}, model has "
            f"{p.layout.n_clusters} seen clusters"
        )
    return z


def re_effects(p: ArmedParams, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature slopes u(z) and intercept u0(z)."""
    z = _check_z(p, z)
    out = nn.logits(p.re, z)
    d = p.layout.n_features
    return out[:, :d], out[:, d]


def mixed_forward(
    p: ArmedParams,
    x: np.ndarray,
    z: np.ndarray,
    fe_mask: Optional[nn.DropoutMask] = None,
) -> MixedPrediction:
    x = np.asarray(x, dtype=np.float64)
    u, u0 = re_effects(p, z)
    h_r = x * (1.0 + u)
    fe = p.fe
    eta_f = nn.logits(fe, x, fe_mask)[:, 0]
    eta_m = nn.logits(fe, h_r, fe_mask)[:, 0] + u0
    return MixedPrediction(expit(eta_f), expit(eta_m), h_r, z, eta_f, eta_m)


def adversary_forward(
    p: ArmedParams,
    x: np.ndarray,
    fe_mask: Optional[nn.DropoutMask] = None,
    adv_mask: Optional[nn.DropoutMask] = None,
) -> np.ndarray:
    cache = nn.forward_cache(p.fe, x, fe_mask)
    return nn.forward(p.adv, cache.penultimate, adv_mask)


def predict_unseen(
    p: ArmedParams,
    x: np.ndarray,
    fe_only: bool = False,
    fe_mask: Optional[nn.DropoutMask] = None,
    zpred_mask: Optional[nn.DropoutMask] = None,
) -> MixedPrediction:
    """Mixed prediction with Z-predictor soft membership in place of z."""
    x = np.asarray(x, dtype=np.float64)
    z_soft = nn.forward(p.zpred, x, zpred_mask)
    if fe_only:
        eta_f = nn.logits(p.fe, x, fe_mask)[:, 0]
        y_f = expit(eta_f)
        return MixedPrediction(y_f, y_f.copy(), x.copy(), z_soft, eta_f, eta_f.copy())
    return mixed_forward(p, x, z_soft, fe_mask)


# ---------- Objective ----------


@dataclass
class LossBreakdown:
    total: float
    fe_bce: float
    me_bce: float
    adversary_ce: float
    re_penalty: float
    kl: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {
            "total": self.total,
            "fe_bce": self.fe_bce,
            "me_bce": self.me_bce,
            "adversary_ce": self.adversary_ce,
            "re_penalty": self.re_penalty,
            "kl": self.kl,
        }


def _objective(
    p: ArmedParams,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    w: LossWeights,
    fe_mask: Optional[nn.DropoutMask],
    with_grad: bool,
) -> Tuple[LossBreakdown, Optional[np.ndarray]]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ArgumentError("empty batch")
    z = _check_z(p, z)
    d = p.layout.n_features
    fe, adv, re = p.fe, p.adv, p.re

    re_out = nn.logits(re, z)
    u, u0 = re_out[:, :d], re_out[:, d]
    h_r = x * (1.0 + u)
    cache_f = nn.forward_cache(fe, x, fe_mask)
    cache_m = nn.forward_cache(fe, h_r, fe_mask)
    eta_m = cache_m.logits + u0[:, None]

    bce = nn.BinaryCrossEntropy()
    fe_bce, g_f = bce.value_and_grad(cache_f.logits, y)
    me_bce, g_m = bce.value_and_grad(eta_m, y)
    adv_cache = nn.forward_cache(adv, cache_f.penultimate)
    adv_ce, g_adv = nn.CategoricalCrossEntropy().value_and_grad(adv_cache.logits, z)
    w_re = re.weight(0)
    re_pen = 0.5 * float(np.sum(w_re * w_re))

    total = w.fe * fe_bce + w.me * me_bce + w.re_penalty * re_pen
    if w.adversary > 0:
        total -= w.adversary * adv_ce
    breakdown = LossBreakdown(total, fe_bce, me_bce, adv_ce, re_pen)
    if not np.isfinite(total):
        raise NumericError("non-finite ARMED loss", layer=_nonfinite_layer(cache_f, cache_m))
    if not with_grad:
        return breakdown, None

    hidden_grads = None
    if w.adversary > 0 and fe.layout[:-1]:
        _, g_pen = nn.backprop(adv, adv_cache, -w.adversary * g_adv)
        hidden_grads = {len(fe.layout) - 2: g_pen}
    g_fe_f, _ = nn.backprop(fe, cache_f, w.fe * g_f, hidden_grads)
    g_fe_m, g_hr = nn.backprop(fe, cache_m, w.me * g_m)
    g_re_out = np.concatenate([g_hr * x, w.me * g_m], axis=1)
    g_re_w = z.T @ g_re_out + w.re_penalty * w_re

    grad = np.zeros_like(p.values)
    grad[p.layout.segment_slice("fe")] = g_fe_f.values + g_fe_m.values
    grad[p.re_weight_indices()] = g_re_w.reshape(-1)
    return breakdown, grad


def _nonfinite_layer(*caches: nn.ForwardCache) -> int:
    for cache in caches:
        for i, z in enumerate(cache.pre):
            if not np.all(np.isfinite(z)):
                return i
    return len(caches[0].pre) - 1


def armed_loss(
    p: ArmedParams,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    weights: LossWeights,
    fe_mask: Optional[nn.DropoutMask] = None,
) -> LossBreakdown:
    """Main objective ``lF*BCE_F + lM*BCE_M - lA*CE_adv + lR*|W_re|^2/2``.

    The adversary CE is always reported in the breakdown, and enters the
    total only when ``weights.adversary > 0``.
    """
    breakdown, _ = _objective(p, x, y, z, weights, fe_mask, with_grad=False)
    return breakdown


def armed_gradients(
    p: ArmedParams,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    weights: LossWeights,
    fe_mask: Optional[nn.DropoutMask] = None,
) -> Tuple[LossBreakdown, np.ndarray]:
    """Main objective and its gradient over the full parameter vector.

    Only FE and RE weight entries are non-zero; the adversary is held fixed.
    """
    breakdown, grad = _objective(p, x, y, z, weights, fe_mask, with_grad=True)
    return breakdown, grad


def adversary_gradients(
    p: ArmedParams,
    x: np.ndarray,
    z: np.ndarray,
    fe_mask: Optional[nn.DropoutMask] = None,
    adv_mask: Optional[nn.DropoutMask] = None,
) -> Tuple[float, np.ndarray]:
    """Adversary CE and its gradient (adversary entries only, FE frozen)."""
    z = _check_z(p, z)
    features = nn.forward_cache(p.fe, x, fe_mask).penultimate
    res = nn.backward(p.adv, features, z, nn.CategoricalCrossEntropy(), adv_mask)
    grad = np.zeros_like(p.values)
    grad[p.layout.segment_slice("adv")] = res.param_grad.values
    return res.loss, grad


# ---------- Training ----------


@dataclass
class ArmedFit:
    params: ArmedParams
    history: List[LossBreakdown] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [h.total for h in self.history]


EpochCallback = Callable[[int, ArmedParams], None]


class ArmedTrainer:
    """Alternating optimization of the main networks and the adversary.

    Each epoch (or each batch, with ``AlternationMode.BATCH``) first updates
    the adversary with the main networks frozen, then the FE and RE weights
    with the adversary frozen. Optimizer state persists across ``fit`` calls.
    """

    def __init__(
        self,
        layout: ArmedLayout,
        training: TrainingConfig,
        weights: LossWeights,
        *,
        seed: int,
        fold: int = 0,
        phase: int = 0,
        freeze_re: bool = False,
        dropout_rate: float = 0.0,
        dropout_scope: DropoutScope = DropoutScope.FE,
        optimizer: str = "adam",
        lr: Optional[float] = None,
    ):
        if optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer '{optimizer}'")
        if not 0.0 <= dropout_rate < 1.0:
            raise ArgumentError(f"dropout rate must be in [0, 1), got {dropout_rate}")
        self.layout = layout
        self.training = training
        self.weights = weights
        self.seed = seed
        self.fold = fold
        self.freeze_re = freeze_re
        self.dropout_rate = dropout_rate
        self.dropout_scope = DropoutScope(dropout_scope)
        self.optimizer = optimizer
        self.lr = float(lr if lr is not None else training.lr)

        probe = ArmedParams(np.zeros(layout.size), layout)
        fe_idx = probe.indices("fe")
        self.main_index = (
            fe_idx if freeze_re else np.concatenate([fe_idx, probe.re_weight_indices()])
        )
        self.adv_index = probe.indices("adv")
        self._main_state = nn.AdamState.create(len(self.main_index), self.lr)
        self._adv_state = nn.AdamState.create(len(self.adv_index), training.lr)
        self._batch_rng = seeding.stream(seed, seeding.BATCHES, fold, phase)
        self._adv_rng = seeding.stream(seed, seeding.ADVERSARY_BATCHES, fold, phase)
        self._dropout_seed = seeding.derive_seed(seed, seeding.DROPOUT_TRAIN, fold, phase)
        self._fe_widths = list(layout.fe.hidden)
        self._adv_widths = list(layout.adv.hidden)
        self.step = 0
        self.adv_step = 0

    # -- masks --

    def _fe_mask(self, batch: int) -> Optional[nn.DropoutMask]:
        if self.dropout_rate <= 0 or not self._fe_widths:
            return None
        return nn.DropoutMask.generate(
            self.dropout_rate, self._fe_widths, self._dropout_seed, self.step, batch
        )

    def _adv_mask(self, batch: int) -> Optional[nn.DropoutMask]:
        if (
            self.dropout_rate <= 0
            or self.dropout_scope is not DropoutScope.ALL
            or not self._adv_widths
        ):
            return None
        return nn.DropoutMask.generate(
            self.dropout_rate,
            self._adv_widths,
            self._dropout_seed + 1,
            self.adv_step,
            batch,
        )

    # -- updates --

    def _apply(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.optimizer == "adam":
            return nn.adam_step(self._main_state, values, grad)
        return nn.sgd_constant_step(values, grad, self.lr)

    def main_step(
        self, values: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray
    ) -> np.ndarray:
        p = ArmedParams(values, self.layout)
        _, grad = armed_gradients(p, x, y, z, self.weights, self._fe_mask(len(x)))
        out = values.copy()
        out[self.main_index] = self._apply(values[self.main_index], grad[self.main_index])
        self.step += 1
        return out

    def adversary_step(self, values: np.ndarray, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        p = ArmedParams(values, self.layout)
        n = len(x)
        _, grad = adversary_gradients(p, x, z, self._fe_mask(n), self._adv_mask(n))
        out = values.copy()
        out[self.adv_index] = nn.adam_step(
            self._adv_state, values[self.adv_index], grad[self.adv_index]
        )
        self.adv_step += 1
        return out

    def evaluate(
        self, values: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray
    ) -> LossBreakdown:
        return armed_loss(ArmedParams(values, self.layout), x, y, z, self.weights)

    # -- loop --

    def fit(
        self,
        params: ArmedParams,
        x: np.ndarray,
        y: np.ndarray,
        z: np.ndarray,
        epochs: Optional[int] = None,
        on_epoch_end: Optional[EpochCallback] = None,
    ) -> ArmedFit:
        epochs = self.training.epochs if epochs is None else epochs
        n = x.shape[0]
        if n == 0:
            raise ArgumentError("cannot train on an empty dataset")
        bs = self.training.batch_size
        values = params.values.copy()
        history: List[LossBreakdown] = []
        for epoch in range(epochs):
            try:
                if self.training.alternation is AlternationMode.EPOCH:
                    for idx in nn.iterate_minibatches(n, bs, self._adv_rng):
                        values = self.adversary_step(values, x[idx], z[idx])
                    for idx in nn.iterate_minibatches(n, bs, self._batch_rng):
                        values = self.main_step(values, x[idx], y[idx], z[idx])
                else:
                    for idx in nn.iterate_minibatches(n, bs, self._batch_rng):
                        values = self.adversary_step(values, x[idx], z[idx])
                        values = self.main_step(values, x[idx], y[idx], z[idx])
                breakdown = self.evaluate(values, x, y, z)
            except TrainingError:
                raise
            except NumericError as exc:
                raise TrainingError(str(exc), epoch) from exc
            if not np.all(np.isfinite(values)):
                raise TrainingError("non-finite parameters", epoch)
            history.append(breakdown)
            logger.debug(
                f"fold {self.fold} epoch {epoch}: loss={breakdown.total:.6f} "
                f"adv_ce={breakdown.adversary_ce:.4f}"
            )
            if on_epoch_end is not None:
                on_epoch_end(epoch, ArmedParams(values.copy(), self.layout))
        return ArmedFit(ArmedParams(values, self.layout), history)


def train_zpredictor(
    params: ArmedParams,
    x: np.ndarray,
    z: np.ndarray,
    training: TrainingConfig,
    *,
    seed: int,
    fold: int = 0,
    dropout_rate: float = 0.0,
) -> ParamVector:
    """Fit the softmax cluster classifier x -> z on seen-cluster data."""
    z = _check_z(params, z)
    present = np.unique(z.argmax(axis=1))
    if present.size < 2:
        logger.warning(
            f"Z-predictor sees {present.size} cluster(s); using a constant predictor"
        )
        zp = ParamVector.zeros(params.layout.zpred.layout())
        freq = z.mean(axis=0)
        head = len(zp.layout) - 1
        zp.bias(head)[:] = np.log(np.clip(freq, 1e-12, None))
        return zp
    epochs = training.zpred_epochs if training.zpred_epochs is not None else training.epochs
    result = nn.train_network(
        params.zpred.copy(),
        x,
        z,
        nn.CategoricalCrossEntropy(),
        epochs=epochs,
        lr=training.lr,
        batch_size=training.batch_size,
        rng=seeding.stream(seed, seeding.ZPRED_BATCHES, fold),
        dropout_rate=dropout_rate,
        dropout_seed=seeding.derive_seed(seed, seeding.DROPOUT_TRAIN, fold, 2),
    )
    return result.params


def train_armed(
    data: "ClusteredDataset",
    training: TrainingConfig,
    weights: LossWeights,
    *,
    seed: int,
    fold: int = 0,
    phase: int = 0,
    init: Optional[ArmedParams] = None,
    freeze_re: bool = False,
    dropout_rate: float = 0.0,
    dropout_scope: DropoutScope = DropoutScope.FE,
    fit_zpred: bool = True,
) -> ArmedFit:
    """Train one ARMED model on ``data`` (the training split of a fold)."""
    layout = ArmedLayout.from_training(data.n_features, data.Z.shape[1], training)
    params = init if init is not None else init_armed(layout, seed, fold)
    trainer = ArmedTrainer(
        layout,
        training,
        weights,
        seed=seed,
        fold=fold,
        phase=phase,
        freeze_re=freeze_re,
        dropout_rate=dropout_rate,
        dropout_scope=dropout_scope,
    )
    fit = trainer.fit(params, data.X, data.y, data.Z)
    if fit_zpred:
        zp_rate = dropout_rate if dropout_scope is DropoutScope.ALL else 0.0
        zp = train_zpredictor(
            fit.params, data.X, data.Z, training, seed=seed, fold=fold, dropout_rate=zp_rate
        )
        fit.params = fit.params.replace("zpred", zp)
    return fit
