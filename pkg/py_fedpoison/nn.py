"""The BAU1 network: dense -> batch-norm -> ReLU -> dropout (twice), dense, log-softmax.

Everything is float64 numpy. Parameters are immutable pydantic models; every
training step builds a new :class:`Bau1Params`.
"""

import logging
from collections.abc import Mapping
from enum import Enum
from typing import Any, NamedTuple, Optional

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .data import Dataset
from .errors import DatasetError, ShapeMismatchError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
Gradients = dict[str, FloatArray]

BAU1_HIDDEN_SIZES = (2048, 1024)
NUM_CLASSES = 2
LEARNING_RATE_RANGE = (1e-4, 9.9e-3)
EVAL_CHUNK_ROWS = 4096

PARAM_NAMES = (
    "layer1.weights",
    "layer1.bias",
    "bn1.gamma",
    "bn1.beta",
    "bn1.running_mean",
    "bn1.running_var",
    "layer2.weights",
    "layer2.bias",
    "bn2.gamma",
    "bn2.beta",
    "bn2.running_mean",
    "bn2.running_var",
    "layer3.weights",
    "layer3.bias",
)
TRAINABLE_NAMES = tuple(name for name in PARAM_NAMES if ".running_" not in name)


def _frozen(value: Any) -> FloatArray:  # noqa: ANN401
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


class ForwardMode(str, Enum):
    """Forward-pass mode; dropout and batch statistics apply only in TRAIN."""

    TRAIN = "train"
    EVAL = "eval"


class DenseLayer(BaseModel):
    """Affine layer with weights shaped (out, in)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: FloatArray
    bias: FloatArray

    @field_validator("weights", "bias", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> FloatArray:  # noqa: ANN401
        return _frozen(value)

    @model_validator(mode="after")
    def _check(self) -> "DenseLayer":
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):  # noqa: PLR2004
            msg = f"bias {self.bias.shape} does not match weights {self.weights.shape}"
            raise ShapeMismatchError(msg)
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            msg = "dense layer has non-finite entries"
            raise ValueError(msg)
        return self

    @property
    def fan_in(self) -> int:
        """Input width."""
        return int(self.weights.shape[1])

    @property
    def fan_out(self) -> int:
        """Output width."""
        return int(self.weights.shape[0])


class BatchNormState(BaseModel):
    """Batch-norm scale/shift plus running statistics for eval mode."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    gamma: FloatArray
    beta: FloatArray
    running_mean: FloatArray
    running_var: FloatArray
    eps: float = Field(default=1e-5, gt=0.0)
    stat_momentum: float = Field(default=0.1, gt=0.0, le=1.0)

    @field_validator("gamma", "beta", "running_mean", "running_var", mode="before")
    @classmethod
    def _coerce(cls, value: Any) -> FloatArray:  # noqa: ANN401
        return _frozen(value)

    @model_validator(mode="after")
    def _check(self) -> "BatchNormState":
        width = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == width):
            msg = "batch-norm vectors must share one width"
            raise ShapeMismatchError(msg)
        if (self.running_var < 0).any():
            msg = "running_var entries must be >= 0"
            raise ValueError(msg)
        return self


class Bau1Params(BaseModel):
    """All trainable and running state of the BAU1 network."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    layer1: DenseLayer
    bn1: BatchNormState
    layer2: DenseLayer
    bn2: BatchNormState
    layer3: DenseLayer

    @model_validator(mode="after")
    def _check_chain(self) -> "Bau1Params":
        h1, h2 = self.layer1.fan_out, self.layer2.fan_out
        ok = (
            self.bn1.gamma.shape == (h1,)
            and self.layer2.fan_in == h1
            and self.bn2.gamma.shape == (h2,)
            and self.layer3.fan_in == h2
            and self.layer3.fan_out == NUM_CLASSES
        )
        if not ok:
            msg = "layer dimensions do not chain d -> h1 -> h2 -> 2"
            raise ShapeMismatchError(msg)
        return self

    @property
    def feature_size(self) -> int:
        """Input width d."""
        return self.layer1.fan_in

    def arrays(self) -> dict[str, FloatArray]:
        """Return every array keyed by its dotted name, in PARAM_NAMES order."""
        out: dict[str, FloatArray] = {}
        for name in PARAM_NAMES:
            block, field = name.split(".")
            out[name] = getattr(getattr(self, block), field)
        return out

    def with_arrays(self, updates: Mapping[str, npt.ArrayLike]) -> "Bau1Params":
        """Return a copy with the named arrays replaced."""
        unknown = set(updates) - set(PARAM_NAMES)
        if unknown:
            msg = f"unknown parameter names: {sorted(unknown)}"
            raise KeyError(msg)
        arrays: dict[str, Any] = {**self.arrays(), **updates}

        def dense(prefix: str) -> DenseLayer:
            return DenseLayer(weights=arrays[f"{prefix}.weights"], bias=arrays[f"{prefix}.bias"])

        def norm(prefix: str, old: BatchNormState) -> BatchNormState:
            return BatchNormState(
                gamma=arrays[f"{prefix}.gamma"],
                beta=arrays[f"{prefix}.beta"],
                running_mean=arrays[f"{prefix}.running_mean"],
                running_var=arrays[f"{prefix}.running_var"],
                eps=old.eps,
                stat_momentum=old.stat_momentum,
            )

        return Bau1Params(
            layer1=dense("layer1"),
            bn1=norm("bn1", self.bn1),
            layer2=dense("layer2"),
            bn2=norm("bn2", self.bn2),
            layer3=dense("layer3"),
        )

    def equals(self, other: "Bau1Params") -> bool:
        """Bitwise equality of every array and batch-norm constant."""
        mine, theirs = self.arrays(), other.arrays()
        same_arrays = all(np.array_equal(mine[name], theirs[name]) for name in PARAM_NAMES)
        same_consts = all(
            (a.eps, a.stat_momentum) == (b.eps, b.stat_momentum)
            for a, b in ((self.bn1, other.bn1), (self.bn2, other.bn2))
        )
        return same_arrays and same_consts


class TrainConfig(BaseModel):
    """Local training settings for one client."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=1, ge=0)
    batch_size: int = Field(default=1000, ge=2)
    learning_rate: Optional[float] = Field(default=None, gt=0.0)
    sgd_momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    dropout_p: float = Field(default=0.5, ge=0.0, lt=1.0)
    seed: int = 0
    hidden_sizes: tuple[int, int] = BAU1_HIDDEN_SIZES
    bn_eps: float = Field(default=1e-5, gt=0.0)
    bn_momentum: float = Field(default=0.1, gt=0.0, le=1.0)

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_widths(cls, value: tuple[int, int]) -> tuple[int, int]:
        if min(value) < 1:
            msg = "hidden sizes must be >= 1"
            raise ValueError(msg)
        return value


def sample_learning_rate(seed: int) -> float:
    """Draw a learning rate uniformly from [1e-4, 9.9e-3]."""
    low, high = LEARNING_RATE_RANGE
    return float(np.random.default_rng(seed).uniform(low, high))


def init_params(
    feature_size: int,
    seed: int,
    hidden_sizes: tuple[int, int] = BAU1_HIDDEN_SIZES,
    bn_eps: float = 1e-5,
    bn_momentum: float = 0.1,
) -> Bau1Params:
    """Initialize BAU1 parameters.

    Weights are uniform in +-1/sqrt(fan_in), biases zero, batch-norm gamma 1,
    beta 0, running mean 0 and running variance 1.
    """
    if feature_size < 1:
        msg = f"feature_size must be >= 1, got {feature_size}"
        raise ValueError(msg)
    rng = np.random.default_rng(seed)

    def dense(fan_in: int, fan_out: int) -> DenseLayer:
        bound = 1.0 / np.sqrt(fan_in)
        return DenseLayer(
            weights=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
            bias=np.zeros(fan_out),
        )

    def norm(width: int) -> BatchNormState:
        return BatchNormState(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            eps=bn_eps,
            stat_momentum=bn_momentum,
        )

    h1, h2 = hidden_sizes
    return Bau1Params(
        layer1=dense(feature_size, h1),
        bn1=norm(h1),
        layer2=dense(h1, h2),
        bn2=norm(h2),
        layer3=dense(h2, NUM_CLASSES),
    )


class _BlockCache(NamedTuple):
    x_in: FloatArray
    xhat: FloatArray
    inv_std: FloatArray
    pre_relu: FloatArray
    dropout_scale: Optional[FloatArray]
    batch_mean: FloatArray
    batch_var: FloatArray


class _ForwardCache(NamedTuple):
    block1: _BlockCache
    block2: _BlockCache
    hidden: FloatArray
    logprobs: FloatArray


def _check_batch(params: Bau1Params, batch: FloatArray, mode: ForwardMode) -> None:
    if batch.ndim != 2 or batch.shape[1] != params.feature_size:  # noqa: PLR2004
        msg = f"batch shape {batch.shape} does not match feature_size {params.feature_size}"
        raise ShapeMismatchError(msg)
    if mode is ForwardMode.TRAIN and batch.shape[0] < 2:  # noqa: PLR2004
        msg = "train-mode batch needs at least 2 rows for batch statistics"
        raise ValueError(msg)


def _block_forward(
    x: FloatArray,
    layer: DenseLayer,
    bn: BatchNormState,
    mode: ForwardMode,
    rng: Optional[np.random.Generator],
    dropout_p: float,
) -> tuple[FloatArray, _BlockCache]:
    z = x @ layer.weights.T + layer.bias
    if mode is ForwardMode.TRAIN:
        mean, var = z.mean(axis=0), z.var(axis=0)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (z - mean) * inv_std
    pre_relu = bn.gamma * xhat + bn.beta
    out = np.maximum(pre_relu, 0.0)

    scale = None
    if mode is ForwardMode.TRAIN and dropout_p > 0.0:
        if rng is None:
            msg = "train-mode dropout needs an rng"
            raise ValueError(msg)
        scale = (rng.random(out.shape) >= dropout_p) / (1.0 - dropout_p)
        out = out * scale
    return out, _BlockCache(x, xhat, inv_std, pre_relu, scale, mean, var)


def _block_backward(
    d_out: FloatArray,
    cache: _BlockCache,
    layer: DenseLayer,
    bn: BatchNormState,
    mode: ForwardMode,
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray, FloatArray]:
    d_act = d_out if cache.dropout_scale is None else d_out * cache.dropout_scale
    d_pre = d_act * (cache.pre_relu > 0.0)
    d_gamma = (d_pre * cache.xhat).sum(axis=0)
    d_beta = d_pre.sum(axis=0)
    d_xhat = d_pre * bn.gamma
    if mode is ForwardMode.TRAIN:
        m = d_xhat.shape[0]
        d_z = (cache.inv_std / m) * (
            m * d_xhat - d_xhat.sum(axis=0) - cache.xhat * (d_xhat * cache.xhat).sum(axis=0)
        )
    else:
        d_z = d_xhat * cache.inv_std
    d_weights = d_z.T @ cache.x_in
    d_bias = d_z.sum(axis=0)
    d_in = d_z @ layer.weights
    return d_in, d_weights, d_bias, d_gamma, d_beta


def _log_softmax(logits: FloatArray) -> FloatArray:
    top = logits.max(axis=1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(
    params: Bau1Params,
    batch: FloatArray,
    mode: ForwardMode,
    rng: Optional[np.random.Generator],
    dropout_p: float,
) -> _ForwardCache:
    _check_batch(params, batch, mode)
    h1, block1 = _block_forward(batch, params.layer1, params.bn1, mode, rng, dropout_p)
    h2, block2 = _block_forward(h1, params.layer2, params.bn2, mode, rng, dropout_p)
    logits = h2 @ params.layer3.weights.T + params.layer3.bias
    return _ForwardCache(block1, block2, h2, _log_softmax(logits))


def forward(
    params: Bau1Params,
    batch: npt.ArrayLike,
    mode: ForwardMode = ForwardMode.EVAL,
    rng: Optional[np.random.Generator] = None,
    dropout_p: float = 0.5,
) -> FloatArray:
    """Run the network and return log-probabilities shaped (rows, 2).

    Raises:
        ShapeMismatchError: If the batch width differs from feature_size
        ValueError: On a one-row train-mode batch
    """
    return _forward(params, np.asarray(batch, dtype=np.float64), mode, rng, dropout_p).logprobs


def _check_labels(labels: npt.ArrayLike, rows: int) -> npt.NDArray[np.int64]:
    y = np.asarray(labels)
    if y.shape != (rows,):
        msg = f"expected {rows} labels, got shape {y.shape}"
        raise ShapeMismatchError(msg)
    if not np.isin(y, (0, 1)).all():
        msg = "labels must be 0 or 1"
        raise ValueError(msg)
    return y.astype(np.int64)


def loss(logprobs: npt.ArrayLike, labels: npt.ArrayLike) -> float:
    """Mean negative log-probability of the true label (cross-entropy)."""
    lp = np.asarray(logprobs, dtype=np.float64)
    y = _check_labels(labels, lp.shape[0])
    if lp.shape[0] == 0:
        msg = "loss of an empty batch is undefined"
        raise ValueError(msg)
    return float(-lp[np.arange(lp.shape[0]), y].mean())


class _StepResult(NamedTuple):
    loss: float
    grads: Gradients
    batch_stats: dict[str, FloatArray]


def _backprop(
    params: Bau1Params,
    batch: FloatArray,
    labels: npt.ArrayLike,
    mode: ForwardMode,
    rng: Optional[np.random.Generator],
    dropout_p: float,
) -> _StepResult:
    cache = _forward(params, batch, mode, rng, dropout_p)
    m = batch.shape[0]
    y = _check_labels(labels, m)

    probs = np.exp(cache.logprobs)
    d_logits = probs
    d_logits[np.arange(m), y] -= 1.0
    d_logits /= m

    grads: Gradients = {
        "layer3.weights": d_logits.T @ cache.hidden,
        "layer3.bias": d_logits.sum(axis=0),
    }
    d_h2 = d_logits @ params.layer3.weights
    d_h1, grads["layer2.weights"], grads["layer2.bias"], grads["bn2.gamma"], grads["bn2.beta"] = (
        _block_backward(d_h2, cache.block2, params.layer2, params.bn2, mode)
    )
    _, grads["layer1.weights"], grads["layer1.bias"], grads["bn1.gamma"], grads["bn1.beta"] = (
        _block_backward(d_h1, cache.block1, params.layer1, params.bn1, mode)
    )

    loss_value = float(-cache.logprobs[np.arange(m), y].mean())
    stats = {
        "bn1.mean": cache.block1.batch_mean,
        "bn1.var": cache.block1.batch_var,
        "bn2.mean": cache.block2.batch_mean,
        "bn2.var": cache.block2.batch_var,
    }
    return _StepResult(loss_value, {name: grads[name] for name in TRAINABLE_NAMES}, stats)


def grad(
    params: Bau1Params,
    batch: npt.ArrayLike,
    labels: npt.ArrayLike,
    mode: ForwardMode = ForwardMode.TRAIN,
    rng: Optional[np.random.Generator] = None,
    dropout_p: float = 0.5,
) -> Gradients:
    """Exact gradients of the cross-entropy loss for every trainable array.

    The dropout mask used for the gradient is the one drawn for the forward
    value, so a unit dropped on every row has zero outgoing-weight gradient.
    """
    batch_array = np.asarray(batch, dtype=np.float64)
    return _backprop(params, batch_array, labels, mode, rng, dropout_p).grads


def _update_running_stats(params: Bau1Params, stats: Mapping[str, FloatArray]) -> Bau1Params:
    updates: dict[str, FloatArray] = {}
    for prefix, bn in (("bn1", params.bn1), ("bn2", params.bn2)):
        m = bn.stat_momentum
        batch_mean = stats[f"{prefix}.mean"]
        updates[f"{prefix}.running_mean"] = (1.0 - m) * bn.running_mean + m * batch_mean
        updates[f"{prefix}.running_var"] = (1.0 - m) * bn.running_var + m * stats[f"{prefix}.var"]
    return params.with_arrays(updates)


def sgd_step(
    params: Bau1Params,
    grads: Mapping[str, FloatArray],
    velocity: Optional[Mapping[str, FloatArray]],
    lr: float,
    momentum: float,
) -> tuple[Bau1Params, Gradients]:
    """Classical momentum step: v <- momentum * v + g; p <- p - lr * v.

    Args:
        params: Current parameters
        grads: Gradients keyed by trainable parameter name
        velocity: Previous velocity, or None for zeros
        lr: Learning rate
        momentum: Momentum coefficient

    Returns:
        Updated parameters and velocity

    Raises:
        ShapeMismatchError: If a gradient or velocity shape differs from its parameter
    """
    current = params.arrays()
    new_velocity: Gradients = {}
    updates: dict[str, FloatArray] = {}
    for name in TRAINABLE_NAMES:
        g = np.asarray(grads[name], dtype=np.float64)
        v_prev = np.zeros_like(current[name]) if velocity is None else velocity[name]
        if g.shape != current[name].shape or v_prev.shape != current[name].shape:
            msg = f"{name}: grad {g.shape}, velocity {v_prev.shape}, param {current[name].shape}"
            raise ShapeMismatchError(msg)
        v = momentum * v_prev + g
        new_velocity[name] = v
        updates[name] = current[name] - lr * v
    return params.with_arrays(updates), new_velocity


def _eval_loss(params: Bau1Params, ds: Dataset) -> float:
    total = 0.0
    for start in range(0, ds.n, EVAL_CHUNK_ROWS):
        rows = slice(start, start + EVAL_CHUNK_ROWS)
        lp = forward(params, ds.X[rows], ForwardMode.EVAL)
        total += loss(lp, ds.y[rows]) * lp.shape[0]
    return total / ds.n


def train_local(params: Bau1Params, shard: Dataset, cfg: TrainConfig) -> tuple[Bau1Params, float]:
    """Train on one shard with mini-batch SGD and momentum.

    Each epoch shuffles the shard with the config seed's generator; a trailing
    batch of one row is dropped. The velocity starts at zero on every call.

    Returns:
        Updated parameters and the mean training loss of the final epoch
        (with ``epochs == 0`` the loss of a single eval pass)

    Raises:
        DatasetError: If the shard is empty or cannot form a two-row batch
    """
    if shard.n == 0:
        msg = "cannot train on an empty shard"
        raise DatasetError(msg)
    if cfg.epochs == 0:
        return params, _eval_loss(params, shard)

    lr = cfg.learning_rate if cfg.learning_rate is not None else sample_learning_rate(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    velocity: Optional[Gradients] = None
    epoch_loss = float("nan")

    for epoch in range(cfg.epochs):
        order = rng.permutation(shard.n)
        total, rows = 0.0, 0
        for start in range(0, shard.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.shape[0] < 2:  # noqa: PLR2004
                continue
            step = _backprop(
                params,
                shard.X[idx],
                shard.y[idx],
                ForwardMode.TRAIN,
                rng,
                cfg.dropout_p,
            )
            params = _update_running_stats(params, step.batch_stats)
            params, velocity = sgd_step(params, step.grads, velocity, lr, cfg.sgd_momentum)
            total += step.loss * idx.shape[0]
            rows += idx.shape[0]
        if rows == 0:
            msg = "shard too small to form a batch of two rows"
            raise DatasetError(msg)
        epoch_loss = total / rows
        logger.debug("epoch %d/%d loss=%.6f", epoch + 1, cfg.epochs, epoch_loss)

    return params, epoch_loss


def predict(params: Bau1Params, X: npt.ArrayLike) -> npt.NDArray[np.int64]:  # noqa: N803
    """Hard labels in eval mode; ties between the two classes go to 0."""
    features = np.asarray(X, dtype=np.float64)
    out = np.empty(features.shape[0], dtype=np.int64)
    for start in range(0, features.shape[0], EVAL_CHUNK_ROWS):
        rows = slice(start, start + EVAL_CHUNK_ROWS)
        lp = forward(params, features[rows], ForwardMode.EVAL)
        out[rows] = lp[:, 1] > lp[:, 0]
    return out


def evaluate(params: Bau1Params, ds: Dataset) -> float:
    """Fraction of rows whose predicted label equals the true label."""
    if ds.n == 0:
        msg = "cannot evaluate on an empty dataset"
        raise DatasetError(msg)
    return float(np.mean(predict(params, ds.X) == ds.y))
