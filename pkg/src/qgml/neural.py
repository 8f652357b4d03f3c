"""
Minimal neural-network engine for field-to-field regression.

Networks are sequences of dense, 3x3 convolution (periodic in x, zero-padded in y), flatten and
reshape layers. Parameters live in one flat vector; gradients come from an explicit backward pass
and Adam updates that vector. Everything runs in numpy and is deterministic for a given seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Protocol, TypeAlias

import numpy as np
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from qgml.constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    FULL_BATCH_LIMIT,
    KERNEL_SIZE,
    MINI_BATCH_SIZE,
    PHASE1_EPOCHS,
    PHASE1_LR,
    PHASE2_EPOCHS,
    PHASE2_LR,
    SWEEP_ACTIVATIONS,
    SWEEP_DEPTHS,
    SWEEP_FAMILIES,
    SWEEP_WIDTHS,
)
from qgml.exceptions import (
    ConfigurationError,
    GridMismatchError,
    NetworkSpecError,
    TrainingDivergedError,
    ZeroVarianceError,
)
from qgml.qg import ModelState

logger = logging.getLogger(__name__)

Activation = Literal["linear", "relu"]
Family = Literal["D", "CD"]
# Flat parameter vector; per-layer views come from `unpack`.
NetworkParams: TypeAlias = np.ndarray


# --- Specs ---


class LayerSpec(BaseModel):
    kind: Literal["dense", "conv2d", "flatten", "reshape"]
    width: int | None = Field(default=None, ge=1)
    filters: int | None = Field(default=None, ge=1)
    kernel: tuple[int, int] = (KERNEL_SIZE, KERNEL_SIZE)
    shape: tuple[int, ...] | None = None
    activation: Activation = "linear"

    model_config = {"extra": "forbid", "frozen": True}

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d")


def _chain(layers: tuple[LayerSpec, ...], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Shapes after every layer; raises NetworkSpecError when a layer cannot take its input."""
    shapes = [tuple(input_shape)]
    for index, layer in enumerate(layers):
        current = shapes[-1]
        if layer.kind == "dense":
            if len(current) != 1 or layer.width is None:
                raise NetworkSpecError(f"Layer {index}: dense needs a flat input and a width, got {current}")
            shapes.append((layer.width,))
        elif layer.kind == "conv2d":
            if len(current) != 3 or layer.filters is None:
                raise NetworkSpecError(f"Layer {index}: conv2d needs (channels, ny, nx), got {current}")
            shapes.append((layer.filters, current[1], current[2]))
        elif layer.kind == "flatten":
            if len(current) != 3:
                raise NetworkSpecError(f"Layer {index}: flatten needs a 3-d input, got {current}")
            shapes.append((int(np.prod(current)),))
        else:
            if len(current) != 1 or layer.shape is None or int(np.prod(layer.shape)) != current[0]:
                raise NetworkSpecError(f"Layer {index}: cannot reshape {current} to {layer.shape}")
            shapes.append(tuple(layer.shape))
    return shapes


class NetworkSpec(BaseModel):
    family: Family
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    model_config = {"extra": "forbid", "frozen": True}

    @model_validator(mode="after")
    def _consistent(self) -> NetworkSpec:
        shapes = _chain(self.layers, self.input_shape)
        if shapes[-1] != tuple(self.input_shape):
            raise NetworkSpecError(f"Output shape {shapes[-1]} differs from input {self.input_shape}")
        kinds = [layer.kind for layer in self.layers]
        if self.family == "D" and "conv2d" in kinds:
            raise NetworkSpecError("D networks are dense-only")
        if "conv2d" in kinds and "dense" in kinds:
            last_conv = max(i for i, k in enumerate(kinds) if k == "conv2d")
            if last_conv > kinds.index("dense"):
                raise NetworkSpecError("Convolutions must all come before the dense layers")
        trainable = [layer for layer in self.layers if layer.has_params]
        if not trainable or trainable[-1].activation != "linear":
            raise NetworkSpecError("The last layer with parameters must be linear")
        return self

    @property
    def output_shape(self) -> tuple[int, ...]:
        return _chain(self.layers, self.input_shape)[-1]

    @property
    def name(self) -> str:
        hidden = [layer for layer in self.layers if layer.has_params][:-1]
        depth = sum(1 for layer in hidden if layer.kind == "dense")
        if not hidden:
            return f"{self.family}-0x0-linear"
        width = hidden[0].width or hidden[0].filters
        activation = hidden[0].activation
        return f"{self.family}-{depth}x{width}-{activation}"


def dense_template(
    depth: int, width: int, activation: Activation, shape: tuple[int, int, int]
) -> NetworkSpec:
    """Flatten, `depth` hidden dense layers, a linear dense output layer, reshape."""
    size = int(np.prod(shape))
    layers = [LayerSpec(kind="flatten")]
    layers += [LayerSpec(kind="dense", width=width, activation=activation) for _ in range(depth)]
    layers += [LayerSpec(kind="dense", width=size), LayerSpec(kind="reshape", shape=shape)]
    return NetworkSpec(family="D", input_shape=shape, layers=tuple(layers))


def conv_dense_template(
    depth: int,
    width: int,
    activation: Activation,
    shape: tuple[int, int, int],
    kernel: tuple[int, int] = (KERNEL_SIZE, KERNEL_SIZE),
) -> NetworkSpec:
    """`depth` convolutions of `width` filters, flatten, `depth` dense layers, output, reshape."""
    size = int(np.prod(shape))
    layers = [
        LayerSpec(kind="conv2d", filters=width, kernel=kernel, activation=activation)
        for _ in range(depth)
    ]
    layers.append(LayerSpec(kind="flatten"))
    layers += [LayerSpec(kind="dense", width=width, activation=activation) for _ in range(depth)]
    layers += [LayerSpec(kind="dense", width=size), LayerSpec(kind="reshape", shape=shape)]
    return NetworkSpec(family="CD", input_shape=shape, layers=tuple(layers))


def sweep_specs(
    shape: tuple[int, int, int],
    *,
    families: tuple[str, ...] = SWEEP_FAMILIES,
    depths: tuple[int, ...] = SWEEP_DEPTHS,
    widths: tuple[int, ...] = SWEEP_WIDTHS,
    activations: tuple[str, ...] = SWEEP_ACTIVATIONS,
) -> list[NetworkSpec]:
    builders = {"D": dense_template, "CD": conv_dense_template}
    return [
        builders[family](depth, width, activation, shape)
        for family in families
        for depth in depths
        for width in widths
        for activation in activations
    ]


# --- Parameters ---


def _layout(spec: NetworkSpec) -> list[tuple[tuple[int, ...], int] | None]:
    """Weight shape and bias length per layer, None for parameter-free layers."""
    shapes = _chain(spec.layers, spec.input_shape)
    layout: list[tuple[tuple[int, ...], int] | None] = []
    for layer, in_shape in zip(spec.layers, shapes[:-1], strict=True):
        if layer.kind == "dense":
            layout.append(((in_shape[0], layer.width), layer.width))
        elif layer.kind == "conv2d":
            layout.append(((layer.filters, in_shape[0], *layer.kernel), layer.filters))
        else:
            layout.append(None)
    return layout


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(w)) + b for w, b in filter(None, _layout(spec)))


def unpack(spec: NetworkSpec, params: NetworkParams) -> list[tuple[np.ndarray, np.ndarray] | None]:
    """Per-layer (weights, bias) views into the flat vector."""
    if params.shape != (param_count(spec),):
        raise GridMismatchError(f"Parameter vector of shape {params.shape}, expected {param_count(spec)}")
    views: list[tuple[np.ndarray, np.ndarray] | None] = []
    offset = 0
    for entry in _layout(spec):
        if entry is None:
            views.append(None)
            continue
        w_shape, b_len = entry
        n_w = int(np.prod(w_shape))
        weights = params[offset : offset + n_w].reshape(w_shape)
        bias = params[offset + n_w : offset + n_w + b_len]
        views.append((weights, bias))
        offset += n_w + b_len
    return views


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> NetworkParams:
    """Glorot-uniform weights scaled by each layer's fan-in and fan-out, zero biases."""
    chunks = []
    for entry in _layout(spec):
        if entry is None:
            continue
        w_shape, b_len = entry
        if len(w_shape) == 2:
            fan_in, fan_out = w_shape
        else:
            receptive = w_shape[2] * w_shape[3]
            fan_in, fan_out = w_shape[1] * receptive, w_shape[0] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=int(np.prod(w_shape))))
        chunks.append(np.zeros(b_len))
    return np.concatenate(chunks)


# --- Forward and backward ---


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[..., j, i] = x[..., j + dy, (i + dx) mod nx], zero where j + dy leaves the rows."""
    out = np.roll(x, -dx, axis=-1) if dx else x
    if dy == 0:
        return out
    pad = np.zeros_like(out[..., : abs(dy), :])
    if dy > 0:
        return np.concatenate([out[..., dy:, :], pad], axis=-2)
    return np.concatenate([pad, out[..., :dy, :]], axis=-2)


def _offsets(kernel: tuple[int, int]) -> list[tuple[int, int, int, int]]:
    kh, kw = kernel
    return [(p, q, p - kh // 2, q - kw // 2) for p in range(kh) for q in range(kw)]


def _conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.zeros((x.shape[0], weights.shape[0], *x.shape[2:]))
    for p, q, dy, dx in _offsets(weights.shape[2:]):
        out += np.einsum("fc,bcyx->bfyx", weights[:, :, p, q], _shift(x, dy, dx))
    return out + bias[None, :, None, None]


def _conv_backward(
    x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_w = np.zeros_like(weights)
    grad_x = np.zeros_like(x)
    for p, q, dy, dx in _offsets(weights.shape[2:]):
        grad_w[:, :, p, q] = np.einsum("bfyx,bcyx->fc", grad_out, _shift(x, dy, dx))
        grad_x += _shift(np.einsum("fc,bfyx->bcyx", weights[:, :, p, q], grad_out), -dy, -dx)
    return grad_w, grad_out.sum(axis=(0, 2, 3)), grad_x


def _run(
    spec: NetworkSpec, params: NetworkParams, x: np.ndarray
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    views = unpack(spec, params)
    cache = []
    h = x
    for layer, view in zip(spec.layers, views, strict=True):
        inp = h
        if layer.kind == "dense":
            z = h @ view[0] + view[1]
        elif layer.kind == "conv2d":
            z = _conv_forward(h, *view)
        elif layer.kind == "flatten":
            z = h.reshape(len(h), -1)
        else:
            z = h.reshape(len(h), *layer.shape)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        cache.append((inp, z))
    return h, cache


def _as_batch(spec: NetworkSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == tuple(spec.input_shape)
    if single:
        x = x[None]
    if x.shape[1:] != tuple(spec.input_shape):
        raise GridMismatchError(f"Input shape {x.shape[1:]} does not match {spec.input_shape}")
    return x, single


def forward(spec: NetworkSpec, params: NetworkParams, x: np.ndarray) -> np.ndarray:
    """Apply the network to one field or a batch of fields (leading axis)."""
    batch, single = _as_batch(spec, x)
    out, _ = _run(spec, params, batch)
    return out[0] if single else out


def loss_and_grads(
    spec: NetworkSpec, params: NetworkParams, inputs: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared error over every output component and sample, and its parameter gradient."""
    batch, _ = _as_batch(spec, inputs)
    if len(batch) == 0:
        raise ValueError("Empty batch")
    targets = np.asarray(targets, dtype=np.float64).reshape(batch.shape[0], *spec.output_shape)
    pred, cache = _run(spec, params, batch)
    residual = pred - targets
    loss = float(np.mean(residual**2))

    views = unpack(spec, params)
    grads: list[np.ndarray] = []
    g = 2.0 * residual / residual.size
    for layer, view, (inp, z) in reversed(list(zip(spec.layers, views, cache, strict=True))):
        if layer.activation == "relu":
            g = g * (z > 0.0)
        if layer.kind == "dense":
            weights = view[0]
            grads += [g.sum(axis=0), (inp.T @ g).ravel()]
            g = g @ weights.T
        elif layer.kind == "conv2d":
            grad_w, grad_b, g = _conv_backward(inp, view[0], g)
            grads += [grad_b, grad_w.ravel()]
        else:
            g = g.reshape(inp.shape)
    return loss, np.concatenate(grads[::-1])


# --- Optimizer ---


@dataclass(frozen=True)
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> AdamMoments:
        return cls(np.zeros(size), np.zeros(size))


def adam_step(
    params: NetworkParams,
    grads: np.ndarray,
    moments: AdamMoments,
    t: int,
    lr: float,
    *,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> tuple[NetworkParams, AdamMoments]:
    """One bias-corrected Adam update; t counts updates starting at 1."""
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    if grads.shape != params.shape:
        raise GridMismatchError(f"Gradient shape {grads.shape} differs from parameters {params.shape}")
    m = beta1 * moments.m + (1.0 - beta1) * grads
    v = beta2 * moments.v + (1.0 - beta2) * grads**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + epsilon), AdamMoments(m, v)


# --- Normalization ---


class Normalizer(BaseModel):
    input_mean: float
    input_std: float = Field(gt=0)
    output_mean: float
    output_std: float = Field(gt=0)

    model_config = {"extra": "forbid", "frozen": True}

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray) -> Normalizer:
        """Scalar mean and population std over every input entry, and over every target entry."""
        if np.size(inputs) == 0 or np.size(targets) == 0:
            raise ValueError("Cannot normalize an empty database")
        in_std, out_std = float(np.std(inputs)), float(np.std(targets))
        if in_std == 0.0 or out_std == 0.0:
            which = "inputs" if in_std == 0.0 else "targets"
            raise ZeroVarianceError(f"Training {which} have zero variance")
        return cls(
            input_mean=float(np.mean(inputs)),
            input_std=in_std,
            output_mean=float(np.mean(targets)),
            output_std=out_std,
        )

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_std

    def normalize_output(self, y: np.ndarray) -> np.ndarray:
        return (y - self.output_mean) / self.output_std

    def denormalize_output(self, y: np.ndarray) -> np.ndarray:
        return y * self.output_std + self.output_mean


def predict_correction(
    spec: NetworkSpec, params: NetworkParams, normalizer: Normalizer | None, state: ModelState
) -> np.ndarray:
    if normalizer is None:
        raise ConfigurationError("Network has no normalizer; train it or load its weights file")
    return normalizer.denormalize_output(forward(spec, params, normalizer.normalize_input(state.psi)))


@dataclass(frozen=True)
class NetworkCorrection:
    """A trained network used as the model-error term accumulated over `tau`."""

    spec: NetworkSpec
    params: NetworkParams
    normalizer: Normalizer
    tau: float

    def __call__(self, state: ModelState) -> np.ndarray:
        return predict_correction(self.spec, self.params, self.normalizer, state)


# --- Training ---


class TrainConfig(BaseModel):
    epochs_phase1: int = Field(default=PHASE1_EPOCHS, ge=1)
    lr_phase1: float = Field(default=PHASE1_LR, gt=0)
    epochs_phase2: int = Field(default=PHASE2_EPOCHS, ge=0)
    lr_phase2: float = Field(default=PHASE2_LR, gt=0)
    beta1: float = Field(default=ADAM_BETA1, ge=0, lt=1)
    beta2: float = Field(default=ADAM_BETA2, ge=0, lt=1)
    epsilon: float = Field(default=ADAM_EPSILON, gt=0)
    batch_size: int | None = Field(default=None, ge=1)
    seed: int = 0
    progress: bool = False

    model_config = {"extra": "forbid", "frozen": True}

    def effective_batch_size(self, n_samples: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return n_samples if n_samples <= FULL_BATCH_LIMIT else MINI_BATCH_SIZE


@dataclass(frozen=True)
class TrainingHistory:
    train_mse: np.ndarray
    valid_mse: np.ndarray
    best_epoch: int

    @property
    def best_valid_mse(self) -> float:
        return float(self.valid_mse[self.best_epoch])


class SupervisedData(Protocol):
    inputs: np.ndarray
    targets: np.ndarray
    normalizer: Normalizer | None


@dataclass(frozen=True)
class TrainResult:
    params: NetworkParams
    normalizer: Normalizer
    history: TrainingHistory
    seed: int


def _mse(spec: NetworkSpec, params: NetworkParams, inputs: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean((forward(spec, params, inputs) - targets) ** 2))


def train(
    spec: NetworkSpec,
    db_train: SupervisedData,
    db_valid: SupervisedData,
    config: TrainConfig,
    *,
    initial_params: NetworkParams | None = None,
) -> TrainResult:
    """
    Two-phase Adam training with best-on-validation checkpointing.

    Each phase restarts the Adam moments from the best parameters seen so far. Validation MSE is
    measured after every epoch in normalized space; the parameters with the lowest value win.

    Parameters:
        spec (NetworkSpec): Architecture.
        db_train: Database with `inputs`, `targets` and an optional `normalizer`.
        db_valid: Validation database, normalized with the training statistics.
        config (TrainConfig): Schedule, Adam constants, batch size and seed.
        initial_params (np.ndarray, optional): Starting parameters instead of a seeded init.

    Returns:
        TrainResult: Best parameters, the normalizer and the per-epoch history.
    """
    if len(db_train.inputs) == 0 or len(db_valid.inputs) == 0:
        raise ValueError("Training and validation databases must be nonempty")
    normalizer = db_train.normalizer or Normalizer.fit(db_train.inputs, db_train.targets)
    x_train = normalizer.normalize_input(db_train.inputs)
    y_train = normalizer.normalize_output(db_train.targets)
    x_valid = normalizer.normalize_input(db_valid.inputs)
    y_valid = normalizer.normalize_output(db_valid.targets)

    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng) if initial_params is None else np.array(initial_params)
    n = len(x_train)
    batch_size = config.effective_batch_size(n)
    best_params, best_valid, best_epoch = params, np.inf, 0
    train_hist: list[float] = []
    valid_hist: list[float] = []

    phases = [(config.epochs_phase1, config.lr_phase1), (config.epochs_phase2, config.lr_phase2)]
    total = sum(e for e, _ in phases)
    bar = tqdm(total=total, desc=f"Training {spec.name}", disable=not config.progress, leave=False)
    for epochs, lr in phases:
        params = best_params if np.isfinite(best_valid) else params
        moments = AdamMoments.zeros(len(params))
        t = 0
        for _ in range(epochs):
            epoch = len(train_hist)
            order = rng.permutation(n)
            running = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                loss, grads = loss_and_grads(spec, params, x_train[idx], y_train[idx])
                if not np.isfinite(loss) or not np.isfinite(grads).all():
                    bar.close()
                    raise TrainingDivergedError(epoch)
                t += 1
                params, moments = adam_step(
                    params, grads, moments, t, lr,
                    beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon,
                )
                running += loss * len(idx)
            valid = _mse(spec, params, x_valid, y_valid)
            if not np.isfinite(valid):
                bar.close()
                raise TrainingDivergedError(epoch)
            train_hist.append(running / n)
            valid_hist.append(valid)
            if valid < best_valid:
                best_params, best_valid, best_epoch = params, valid, epoch
            bar.update(1)
    bar.close()
    logger.info(f"Trained {spec.name}: best validation MSE {best_valid:.4g} at epoch {best_epoch}")
    return TrainResult(
        params=best_params,
        normalizer=normalizer,
        history=TrainingHistory(np.array(train_hist), np.array(valid_hist), best_epoch),
        seed=config.seed,
    )
