"""
Dense-network numerical core.

A small, dependency-light multilayer perceptron engine on numpy:

- ``ParamVector``: all weights and biases of a network as one flat vector,
  addressed through an immutable layer layout.
- ``forward`` / ``backward`` / ``input_gradient``: forward evaluation and exact
  reverse-mode gradients with respect to parameters and inputs.
- ``AdamState`` / ``adam_step`` / ``sgd_constant_step``: optimizers.
- ``DropoutMask``: per-layer keep masks that are a pure function of
  ``(seed, draw_index)``.

Every function here is pure with respect to its array arguments (forward and
backward never mutate ``params``), so one parameter vector can be evaluated
from many threads at once. Optimizer state is single-writer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp, softmax

from app.core import seeding
from app.core.errors import (
    ArgumentError,
    ConfigurationError,
    NumericError,
    TrainingError,
)

logger = logging.getLogger(__name__)


# ---------- Layout ----------


class Activation(str, Enum):
    """Per-layer nonlinearity tag."""

    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"


HEAD_ACTIVATIONS = (Activation.SIGMOID, Activation.SOFTMAX, Activation.IDENTITY)


@dataclass(frozen=True)
class LayerSpec:
    """One dense layer: ``out = act(in @ W + b)`` with W stored row-major."""

    in_dim: int
    out_dim: int
    activation: Activation

    @property
    def size(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


Layout = Tuple[LayerSpec, ...]


def layout_size(layout: Sequence[LayerSpec]) -> int:
    return sum(layer.size for layer in layout)


def layout_to_dict(layout: Sequence[LayerSpec]) -> List[Dict[str, object]]:
    return [
        {"in": s.in_dim, "out": s.out_dim, "activation": s.activation.value}
        for s in layout
    ]


def layout_from_dict(items: Sequence[Dict[str, object]]) -> Layout:
    return tuple(
        LayerSpec(int(i["in"]), int(i["out"]), Activation(str(i["activation"])))
        for i in items
    )


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat weight vector plus the layout mapping slices to layers."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        layout = tuple(self.layout)
        if values.ndim != 1 or values.shape[0] != layout_size(layout):
            raise ConfigurationError(
                f"parameter vector of length {values.shape} does not match "
                f"layout size {layout_size(layout)}"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    # -- construction --

    @classmethod
    def zeros(cls, layout: Sequence[LayerSpec]) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), tuple(layout))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    # -- addressing --

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def offsets(self) -> List[Tuple[slice, slice]]:
        """(weight slice, bias slice) per layer."""
        out: List[Tuple[slice, slice]] = []
        pos = 0
        for layer in self.layout:
            w_end = pos + layer.in_dim * layer.out_dim
            b_end = w_end + layer.out_dim
            out.append((slice(pos, w_end), slice(w_end, b_end)))
            pos = b_end
        return out

    def weight(self, i: int) -> np.ndarray:
        w, _ = self.offsets()[i]
        layer = self.layout[i]
        return self.values[w].reshape(layer.in_dim, layer.out_dim)

    def bias(self, i: int) -> np.ndarray:
        _, b = self.offsets()[i]
        return self.values[b]

    def layer_slice(self, i: int) -> slice:
        w, b = self.offsets()[i]
        return slice(w.start, b.stop)

    # -- arithmetic --

    def _check(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ConfigurationError("parameter vectors have different layouts")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of a dense network: hidden widths, activations and the head."""

    input_dim: int
    hidden: Tuple[int, ...] = (4, 4, 4, 4)
    output_dim: int = 1
    hidden_activation: Activation = Activation.RELU
    head: Activation = Activation.SIGMOID

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("network dimensions must be positive")
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError(f"invalid hidden widths {self.hidden}")
        if self.head not in HEAD_ACTIVATIONS:
            raise ConfigurationError(f"unsupported head activation {self.head}")
        if self.head is Activation.SIGMOID and self.output_dim != 1:
            raise ConfigurationError("sigmoid head must have a single output unit")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def layout(self) -> Layout:
        dims = [self.input_dim, *self.hidden]
        layers = [
            LayerSpec(dims[i], dims[i + 1], self.hidden_activation)
            for i in range(len(self.hidden))
        ]
        layers.append(LayerSpec(dims[-1], self.output_dim, self.head))
        return tuple(layers)

    @property
    def penultimate_width(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def init(self, rng: np.random.Generator, zero_head: bool = False) -> ParamVector:
        """Glorot-uniform weights, zero biases."""
        params = ParamVector.zeros(self.layout())
        values = params.values
        for i, (layer, (w, _)) in enumerate(zip(params.layout, params.offsets())):
            if zero_head and i == len(params.layout) - 1:
                continue
            limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            values[w] = rng.uniform(-limit, limit, size=w.stop - w.start)
        return params


# ---------- Dropout ----------


@dataclass(frozen=True, eq=False)
class DropoutMask:
    """Binary keep masks for the inputs of every non-first layer.

    A mask with 1-D keep arrays is shared by every row of a batch (one thinned
    network, i.e. one weight draw). A mask with 2-D keep arrays carries one
    row per sample and is what training uses.
    """

    rate: float
    keep: Tuple[np.ndarray, ...]
    seed: int = 0
    draw_index: int = 0

    @staticmethod
    def _check_rate(rate: float) -> None:
        if not 0.0 <= rate < 1.0:
            raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")

    @classmethod
    def generate(
        cls,
        rate: float,
        widths: Sequence[int],
        seed: int,
        draw_index: int,
        batch: Optional[int] = None,
    ) -> "DropoutMask":
        cls._check_rate(rate)
        rng = seeding.stream(seed, seeding.DROPOUT, draw_index)
        keep = []
        for w in widths:
            shape = (w,) if batch is None else (batch, w)
            keep.append(rng.random(shape) >= rate)
        return cls(float(rate), tuple(keep), int(seed), int(draw_index))

    def scale(self, i: int) -> np.ndarray:
        return self.keep[i] / (1.0 - self.rate)

    def kept_units(self) -> List[int]:
        return [int(k.sum()) for k in self.keep]


# ---------- Losses ----------


class LossFn(Protocol):
    """Anything that maps head logits and targets to (mean loss, dLoss/dlogits)."""

    def value_and_grad(
        self, logits: np.ndarray, y: np.ndarray
    ) -> Tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class BinaryCrossEntropy:
    """Mean BCE fused with a sigmoid head (computed on logits)."""

    weight: float = 1.0

    def value_and_grad(
        self, logits: np.ndarray, y: np.ndarray
    ) -> Tuple[float, np.ndarray]:
        z = logits[:, 0]
        t = np.asarray(y, dtype=np.float64).reshape(-1)
        n = z.shape[0]
        loss = float(np.mean(np.logaddexp(0.0, z) - t * z))
        grad = (expit(z) - t) / n
        return self.weight * loss, (self.weight * grad)[:, None]


@dataclass(frozen=True)
class CategoricalCrossEntropy:
    """Mean categorical CE fused with a softmax head.

    Targets are either integer class labels or (soft) one-hot rows.
    """

    weight: float = 1.0

    def value_and_grad(
        self, logits: np.ndarray, y: np.ndarray
    ) -> Tuple[float, np.ndarray]:
        n, c = logits.shape
        t = np.asarray(y)
        if t.ndim == 1:
            onehot = np.zeros((n, c))
            onehot[np.arange(n), t.astype(int)] = 1.0
            t = onehot
        t = t.astype(np.float64)
        loss = float(np.mean(logsumexp(logits, axis=1) - np.sum(t * logits, axis=1)))
        grad = (softmax(logits, axis=1) * t.sum(axis=1, keepdims=True) - t) / n
        return self.weight * loss, self.weight * grad


class LossTag(str, Enum):
    BCE = "bce"
    CATEGORICAL_CE = "categorical-ce"
    COMPOSITE = "composite"


def resolve_loss(loss: Union[LossTag, str, LossFn]) -> LossFn:
    if isinstance(loss, (LossTag, str)):
        tag = LossTag(loss)
        if tag is LossTag.BCE:
            return BinaryCrossEntropy()
        if tag is LossTag.CATEGORICAL_CE:
            return CategoricalCrossEntropy()
        raise ArgumentError("composite losses are passed as a loss object")
    return loss


# ---------- Forward / backward ----------


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.TANH:
        return np.tanh(z)
    if act is Activation.SIGMOID:
        return expit(z)
    if act is Activation.SOFTMAX:
        return softmax(z, axis=1)
    return z


def _activation_grad(z: np.ndarray, h: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    if act is Activation.TANH:
        return 1.0 - h * h
    if act is Activation.SIGMOID:
        return h * (1.0 - h)
    if act is Activation.IDENTITY:
        return np.ones_like(z)
    raise ConfigurationError(f"{act.value} is only supported as a head activation")


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass.

    ``inputs[l]`` is the (masked) input of layer ``l``; ``pre[l]`` its
    pre-activation; ``hidden[j]`` the unmasked activation of hidden layer ``j``.
    """

    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    hidden: List[np.ndarray]
    mask: Optional[DropoutMask] = None

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]

    @property
    def penultimate(self) -> np.ndarray:
        return self.hidden[-1] if self.hidden else self.inputs[0]


def forward_cache(
    params: ParamVector, x: np.ndarray, mask: Optional[DropoutMask] = None
) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    layout = params.layout
    if x.ndim != 2 or x.shape[1] != layout[0].in_dim:
        raise ConfigurationError(
            f"input has shape {x.shape}, network expects {layout[0].in_dim} columns"
        )
    if mask is not None and len(mask.keep) != len(layout) - 1:
        raise ConfigurationError(
            f"dropout mask has {len(mask.keep)} layers, network has "
            f"{len(layout) - 1} hidden layers"
        )
    inputs = [x]
    pre: List[np.ndarray] = []
    hidden: List[np.ndarray] = []
    a = x
    for i, layer in enumerate(layout):
        z = a @ params.weight(i) + params.bias(i)
        pre.append(z)
        if i == len(layout) - 1:
            break
        h = _activate(z, layer.activation)
        hidden.append(h)
        a = h * mask.scale(i) if mask is not None else h
        inputs.append(a)
    return ForwardCache(inputs, pre, hidden, mask)


def logits(
    params: ParamVector, x: np.ndarray, mask: Optional[DropoutMask] = None
) -> np.ndarray:
    return forward_cache(params, x, mask).logits


def forward(
    params: ParamVector, x: np.ndarray, mask: Optional[DropoutMask] = None
) -> np.ndarray:
    """Evaluate the network, head activation included."""
    cache = forward_cache(params, x, mask)
    return _activate(cache.logits, params.layout[-1].activation)


def backprop(
    params: ParamVector,
    cache: ForwardCache,
    grad_logits: np.ndarray,
    hidden_grads: Optional[Dict[int, np.ndarray]] = None,
) -> Tuple[ParamVector, np.ndarray]:
    """Vector-Jacobian product of one forward pass.

    Args:
        params: parameters the cache was computed with
        cache: forward pass intermediates
        grad_logits: upstream gradient w.r.t. the head pre-activation
        hidden_grads: extra upstream gradients w.r.t. unmasked hidden
            activations, keyed by hidden layer index

    Returns:
        (parameter gradient, input gradient)
    """
    layout = params.layout
    grad = np.zeros_like(params.values)
    offsets = params.offsets()
    g = np.asarray(grad_logits, dtype=np.float64)
    input_grad = g
    for i in range(len(layout) - 1, -1, -1):
        w_sl, b_sl = offsets[i]
        grad[w_sl] = (cache.inputs[i].T @ g).reshape(-1)
        grad[b_sl] = g.sum(axis=0)
        ga = g @ params.weight(i).T
        if i == 0:
            input_grad = ga
            break
        j = i - 1
        if cache.mask is not None:
            ga = ga * cache.mask.scale(j)
        if hidden_grads and j in hidden_grads:
            ga = ga + hidden_grads[j]
        g = ga * _activation_grad(cache.pre[j], cache.hidden[j], layout[j].activation)
    return ParamVector(grad, layout), input_grad


@dataclass
class GradResult:
    loss: float
    param_grad: ParamVector
    input_grad: np.ndarray


def _first_nonfinite_layer(cache: ForwardCache) -> int:
    for i, z in enumerate(cache.pre):
        if not np.all(np.isfinite(z)):
            return i
    return len(cache.pre) - 1


def backward(
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    loss: Union[LossTag, str, LossFn] = LossTag.BCE,
    mask: Optional[DropoutMask] = None,
) -> GradResult:
    """Mean loss and its exact gradients w.r.t. parameters and inputs."""
    fn = resolve_loss(loss)
    cache = forward_cache(params, x, mask)
    value, g = fn.value_and_grad(cache.logits, y)
    if not np.isfinite(value):
        raise NumericError("non-finite loss", layer=_first_nonfinite_layer(cache))
    pgrad, xgrad = backprop(params, cache, g)
    return GradResult(float(value), pgrad, xgrad)


def input_gradient(
    params: ParamVector,
    x: np.ndarray,
    target: str = "logit",
    output_index: int = 0,
    mask: Optional[DropoutMask] = None,
) -> np.ndarray:
    """Per-sample derivative of one output unit w.r.t. every input feature.

    ``target="logit"`` differentiates the head pre-activation (log-odds for a
    sigmoid head); ``target="probability"`` differentiates the head output.
    """
    if target not in ("logit", "probability"):
        raise ArgumentError(f"unknown gradient target '{target}'")
    cache = forward_cache(params, x, mask)
    z = cache.logits
    n, c = z.shape
    g = np.zeros((n, c))
    g[:, output_index] = 1.0
    if target == "probability":
        head = params.layout[-1].activation
        if head is Activation.SIGMOID:
            p = expit(z)
            g = g * p * (1.0 - p)
        elif head is Activation.SOFTMAX:
            p = softmax(z, axis=1)
            pk = p[:, [output_index]]
            g = pk * (g - p)
    _, xgrad = backprop(params, cache, g)
    return xgrad


# ---------- Optimizers ----------


@dataclass
class AdamState:
    """Adam moments for a vector of ``size`` parameters."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def create(cls, size: int, lr: float, **kwargs: float) -> "AdamState":
        return cls(lr=float(lr), m=np.zeros(size), v=np.zeros(size), **kwargs)


def _check_finite_grad(grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update; moments in ``state`` are updated in place."""
    grad = np.asarray(grad, dtype=np.float64)
    _check_finite_grad(grad)
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def sgd_constant_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Plain SGD with a constant learning rate: no momentum, no decay."""
    if lr <= 0:
        raise ArgumentError(f"learning rate must be positive, got {lr}")
    return params - lr * np.asarray(grad, dtype=np.float64)


# ---------- Plain training loop ----------


def iterate_minibatches(
    n: int, batch_size: int, rng: np.random.Generator
) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class TrainResult:
    params: ParamVector
    history: List[float] = field(default_factory=list)


def train_network(
    params: ParamVector,
    x: np.ndarray,
    y: np.ndarray,
    loss: Union[LossTag, str, LossFn],
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    dropout_rate: float = 0.0,
    dropout_seed: int = 0,
) -> TrainResult:
    """Minibatch Adam on a single network.

    ``history[e]`` is the full-data loss after epoch ``e``. With a positive
    ``dropout_rate`` every batch gets a fresh per-sample mask.
    """
    fn = resolve_loss(loss)
    state = AdamState.create(len(params), lr)
    values = params.values.copy()
    widths = [layer.out_dim for layer in params.layout[:-1]]
    history: List[float] = []
    n = x.shape[0]
    step = 0
    for epoch in range(epochs):
        for idx in iterate_minibatches(n, batch_size, rng):
            mask = None
            if dropout_rate > 0 and widths:
                mask = DropoutMask.generate(
                    dropout_rate, widths, dropout_seed, step, batch=len(idx)
                )
            res = backward(params.with_values(values), x[idx], y[idx], fn, mask)
            values = adam_step(state, values, res.param_grad.values)
            step += 1
        value, _ = fn.value_and_grad(logits(params.with_values(values), x), y)
        if not np.isfinite(value):
            raise TrainingError("non-finite training loss", epoch)
        history.append(float(value))
        logger.debug(f"epoch {epoch}: loss={value:.6f}")
    return TrainResult(params.with_values(values), history)
