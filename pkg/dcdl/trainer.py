"""A small embedding network trained with any LossConfig, plus its optimizers and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from dcdl.data import BalancedBatchSampler, Dataset, NoiseSpec, inject_noise
from dcdl.distributions import EmbeddingBatch, make_embedding_batch
from dcdl.losses import Classifier, LossConfig, LossValue, train_loss
from dcdl.metrics import metrics
from dcdl.ot_solver import NumericalError


logger = logging.getLogger(__name__)

NORM_GUARD = 1e-12
CHECKPOINT_MAGIC = "dcdl-checkpoint 1"

DEFAULT_ADAM_LR = 5e-4
DEFAULT_SGD_LR = 1e-2
TRIPLET_ROWS_PER_CLASS = 10
PAIR_ROWS_PER_CLASS = 2


class TrainingDiverged(NumericalError):
    def __init__(self, epoch: int, detail: str):
        self.epoch = epoch
        self.detail = detail
        super().__init__(f"training diverged at epoch {epoch}: {detail}")


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_dim: int = Field(default=0, ge=0)
    embedding_dim: int = Field(default=64, ge=1)
    seed: int = 0


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["adam", "sgd_momentum"] = "adam"
    learning_rate: float | None = Field(default=None, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(default=1e-8, gt=0.0)
    decay_factor: float = Field(default=0.1, gt=0.0, le=1.0)
    decay_every: int = Field(default=50, ge=1)
    epochs: int = Field(default=100, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def resolve_learning_rate(self) -> "OptimizerConfig":
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_ADAM_LR if self.kind == "adam" else DEFAULT_SGD_LR
        return self

    @property
    def base_rate(self) -> float:
        return float(self.learning_rate or 0.0)


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int | None = Field(default=None, ge=1)
    r: int | None = Field(default=None, ge=1)


def learning_rate_at(cfg: OptimizerConfig, epoch: int) -> float:
    return cfg.base_rate * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class Layer:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    outputs: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray


@dataclass
class EmbeddingModel:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weights.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1].weights.shape[0])

    @property
    def parameter_count(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.extend([layer.weights, layer.bias])
        return params

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            [Layer(layer.weights.copy(), layer.bias.copy()) for layer in self.layers]
        )

    @classmethod
    def identity(cls, dim: int) -> "EmbeddingModel":
        return cls([Layer(np.eye(dim), np.zeros(dim))])

    def forward_pass(self, features: np.ndarray) -> ForwardCache:
        inputs = np.asarray(features, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.input_dim:
            raise ValueError(
                f"model expects {self.input_dim} input features, got shape {inputs.shape}"
            )
        pre_activations: list[np.ndarray] = []
        activations: list[np.ndarray] = [inputs]
        current = inputs
        for index, layer in enumerate(self.layers):
            pre = current @ layer.weights.T + layer.bias
            if index < len(self.layers) - 1:
                pre_activations.append(pre)
                current = np.maximum(pre, 0.0)
                activations.append(current)
            else:
                current = pre
        if not np.all(np.isfinite(current)):
            raise NumericalError("model produced non-finite activations")
        norms = np.linalg.norm(current, axis=1)
        degenerate = np.flatnonzero(norms < NORM_GUARD)
        if degenerate.size:
            raise ValueError(f"embedding row {int(degenerate[0])} has zero norm before normalization")
        embeddings = current / (norms + NORM_GUARD)[:, None]
        return ForwardCache(inputs, pre_activations, activations, current, norms, embeddings)


def init_model(spec: ModelSpec, input_dim: int) -> EmbeddingModel:
    """Weights and biases uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(spec.seed)
    dims = [input_dim]
    if spec.hidden_dim:
        dims.append(spec.hidden_dim)
    dims.append(spec.embedding_dim)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights = rng.uniform(-bound, bound, (fan_out, fan_in))
        layers.append(Layer(weights, rng.uniform(-bound, bound, fan_out)))
    model = EmbeddingModel(layers)
    logger.info("initialized model dims=%s parameters=%s", dims, model.parameter_count)
    return model


def forward(
    model: EmbeddingModel,
    features: np.ndarray,
    labels: np.ndarray | None = None,
    num_classes: int | None = None,
) -> EmbeddingBatch:
    cache = model.forward_pass(features)
    if labels is None:
        labels = np.zeros(cache.embeddings.shape[0], dtype=np.int64)
    if num_classes is None:
        num_classes = int(np.max(labels, initial=0)) + 1
    return make_embedding_batch(cache.embeddings, labels, num_classes)


def backward(
    model: EmbeddingModel, cache: ForwardCache, grad_embeddings: np.ndarray
) -> list[np.ndarray]:
    """Chain rule through the normalization and every layer; order matches parameters()."""
    grad_z = np.asarray(grad_embeddings, dtype=np.float64)
    if grad_z.shape != cache.embeddings.shape:
        raise ValueError(
            f"gradient shape {grad_z.shape} does not match embeddings {cache.embeddings.shape}"
        )
    y = cache.outputs
    norms = cache.norms[:, None]
    denom = norms + NORM_GUARD
    radial = np.sum(y * grad_z, axis=1, keepdims=True)
    grad_current = grad_z / denom - y * radial / (norms * denom**2)

    grads: list[np.ndarray] = []
    for index in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[index]
        layer_input = cache.activations[index]
        grads.append(grad_current.sum(axis=0))
        grads.append(grad_current.T @ layer_input)
        if index > 0:
            grad_current = (grad_current @ layer.weights) * (cache.pre_activations[index - 1] > 0.0)
    grads.reverse()
    return grads


def _extend_slots(slots: list[np.ndarray], params: list[np.ndarray]) -> None:
    # parameters appended after the first step get fresh state; a shorter list leaves the tail untouched
    slots.extend(np.zeros_like(p) for p in params[len(slots):])


class SGDMomentum:
    def __init__(self, momentum: float) -> None:
        self.momentum = momentum
        self._velocity: list[np.ndarray] = []

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        _extend_slots(self._velocity, params)
        for param, grad, velocity in zip(params, grads, self._velocity):
            velocity *= self.momentum
            velocity += grad
            param -= lr * velocity


class Adam:
    def __init__(self, beta1: float, beta2: float, epsilon: float) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self._m: list[np.ndarray] = []
        self._v: list[np.ndarray] = []

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        _extend_slots(self._m, params)
        _extend_slots(self._v, params)
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for param, grad, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)


def make_optimizer(cfg: OptimizerConfig) -> SGDMomentum | Adam:
    if cfg.kind == "sgd_momentum":
        return SGDMomentum(cfg.momentum)
    return Adam(cfg.beta1, cfg.beta2, cfg.adam_epsilon)


def resolve_sampler(sampler: SamplerConfig, loss_cfg: LossConfig, num_classes: int) -> tuple[int, int]:
    r = sampler.r
    if r is None:
        r = TRIPLET_ROWS_PER_CLASS if loss_cfg.local in {"triplet", "none"} else PAIR_ROWS_PER_CLASS
    batch_size = sampler.batch_size if sampler.batch_size is not None else r * num_classes
    return batch_size, r


@dataclass
class EpochLog:
    epoch: int
    learning_rate: float
    total: float
    local: float
    phi: float
    xent: float
    batches: int
    report: object | None = None


@dataclass
class TrainingResult:
    model: EmbeddingModel
    classifier: Classifier | None
    log: list[EpochLog] = field(default_factory=list)
    noisy_labels: np.ndarray | None = None
    noise_mask: np.ndarray | None = None


def _warmup_config(loss_cfg: LossConfig) -> LossConfig:
    return LossConfig(local="none", use_xent=True, lambda_xent=loss_cfg.lambda_xent)


def _check_finite(value: LossValue, epoch: int) -> None:
    if not math.isfinite(value.total):
        raise TrainingDiverged(epoch, f"loss is {value.total}")
    if not np.all(np.isfinite(value.gradient)):
        raise TrainingDiverged(epoch, "embedding gradient is not finite")


def train(
    dataset: Dataset,
    model_spec: ModelSpec,
    loss_cfg: LossConfig,
    optimizer_cfg: OptimizerConfig,
    noise: NoiseSpec | None = None,
    sampler_cfg: SamplerConfig | None = None,
    warmup_xent_epochs: int = 0,
    evaluate: Callable[[EmbeddingModel, int], object | None] | None = None,
    noisy_labels: np.ndarray | None = None,
) -> TrainingResult:
    """Apply label noise once, then run epochs of class-balanced mini-batches.

    Passing noisy_labels skips the injection; noise is then ignored.
    """
    if noisy_labels is None:
        noisy_labels, mask = inject_noise(dataset.labels, noise or NoiseSpec(), dataset.num_classes)
    else:
        noisy_labels = np.asarray(noisy_labels, dtype=np.int64)
        if noisy_labels.shape != dataset.labels.shape:
            raise ValueError(f"got {noisy_labels.size} noisy labels for {dataset.size} rows")
        mask = noisy_labels != dataset.labels
    model = init_model(model_spec, dataset.dim)

    needs_classifier = loss_cfg.use_xent or warmup_xent_epochs > 0
    classifier = Classifier.zeros(dataset.num_classes, model.output_dim) if needs_classifier else None

    batch_size, r = resolve_sampler(sampler_cfg or SamplerConfig(), loss_cfg, dataset.num_classes)
    sampler = BalancedBatchSampler(noisy_labels, batch_size, r, optimizer_cfg.seed)
    optimizer = make_optimizer(optimizer_cfg)
    warmup_cfg = _warmup_config(loss_cfg)
    result = TrainingResult(model=model, classifier=classifier, noisy_labels=noisy_labels, noise_mask=mask)

    for epoch in range(optimizer_cfg.epochs):
        lr = learning_rate_at(optimizer_cfg, epoch)
        epoch_cfg = warmup_cfg if epoch < warmup_xent_epochs else loss_cfg
        epoch_classifier = classifier if epoch_cfg.use_xent else None
        sums = np.zeros(4)
        batches = sampler.epoch(epoch)
        for rows in batches:
            cache = model.forward_pass(dataset.features[rows])
            batch = make_embedding_batch(cache.embeddings, noisy_labels[rows], dataset.num_classes)
            value = train_loss(batch, epoch_cfg, epoch_classifier)
            _check_finite(value, epoch)
            params = model.parameters()
            grads = backward(model, cache, value.gradient)
            if epoch_classifier is not None and value.classifier_gradient is not None:
                params += [epoch_classifier.weights, epoch_classifier.bias]
                grads += [value.classifier_gradient.weights, value.classifier_gradient.bias]
            optimizer.step(params, grads, lr)
            sums += (value.total, value.local_part, value.phi_part, value.xent_part)
            metrics.inc("train_steps_total")
        means = sums / max(len(batches), 1)
        report = evaluate(model, epoch) if evaluate is not None else None
        entry = EpochLog(epoch, lr, *(float(v) for v in means), batches=len(batches), report=report)
        result.log.append(entry)
        logger.info(
            "epoch=%s lr=%s total=%.6f local=%.6f phi=%.6f xent=%.6f batches=%s",
            epoch, lr, entry.total, entry.local, entry.phi, entry.xent, entry.batches,
        )
    return result


def save_checkpoint(model: EmbeddingModel, path: str | Path) -> None:
    lines = [CHECKPOINT_MAGIC, f"layers {len(model.layers)}"]
    for index, layer in enumerate(model.layers):
        rows, cols = layer.weights.shape
        lines.append(f"layer {index} weights {rows} {cols}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in layer.weights)
        lines.append(f"layer {index} bias {layer.bias.size}")
        lines.append(" ".join(repr(float(v)) for v in layer.bias))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> EmbeddingModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    cursor = 1

    def take() -> str:
        nonlocal cursor
        if cursor >= len(lines):
            raise ValueError(f"{path}: truncated checkpoint")
        line = lines[cursor]
        cursor += 1
        return line

    def parse_values(line: str, expected: int) -> list[float]:
        values = [float(token) for token in line.split()]
        if len(values) != expected:
            raise ValueError(f"{path}:{cursor}: expected {expected} values, got {len(values)}")
        return values

    header = take().split()
    if len(header) != 2 or header[0] != "layers":
        raise ValueError(f"{path}:{cursor}: expected 'layers N'")
    layers: list[Layer] = []
    for index in range(int(header[1])):
        shape = take().split()
        if shape[:3] != ["layer", str(index), "weights"]:
            raise ValueError(f"{path}:{cursor}: expected weights header for layer {index}")
        rows, cols = int(shape[3]), int(shape[4])
        weights = np.array([parse_values(take(), cols) for _ in range(rows)], dtype=np.float64)
        bias_header = take().split()
        if bias_header[:3] != ["layer", str(index), "bias"] or int(bias_header[3]) != rows:
            raise ValueError(f"{path}:{cursor}: expected bias header for layer {index}")
        bias = np.array(parse_values(take(), rows), dtype=np.float64)
        layers.append(Layer(weights.reshape(rows, cols), bias))
    return EmbeddingModel(layers)
