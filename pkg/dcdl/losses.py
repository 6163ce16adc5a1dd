"""Local metric losses, the class-wise discrepancy loss and the combined training loss.

Every loss returns its value together with the analytic gradient with respect
to the embedding rows (and classifier parameters for cross entropy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp

from dcdl.discrepancy import DiscrepancyKind, phi_with_gradient
from dcdl.distributions import DiscreteDistribution, EmbeddingBatch, make_distribution


LocalLossName = Literal["triplet", "npairs", "angular", "angular_npairs", "none"]

DEFAULT_LAMBDA_MMD = 0.2
DEFAULT_LAMBDA_TRANSPORT = 0.5


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    local: LocalLossName = "triplet"
    discrepancy: DiscrepancyKind | None = None
    lambda_: float | None = Field(default=None, ge=0.0, alias="lambda")
    lambda_xent: float = Field(default=1.0, ge=0.0)
    lambda_ang: float = Field(default=2.0)
    tau: float = Field(default=0.5, gt=0.0)
    alpha_degrees: float = Field(default=30.0, gt=0.0, lt=90.0)
    use_xent: bool = False

    @model_validator(mode="after")
    def resolve_defaults(self) -> "LossConfig":
        if self.local == "none" and self.discrepancy is None and not self.use_xent:
            raise ValueError("loss is empty: set local, discrepancy or use_xent")
        if self.lambda_ is None:
            if self.discrepancy is None:
                self.lambda_ = 0.0
            elif self.discrepancy.kind == "wasserstein":
                self.lambda_ = DEFAULT_LAMBDA_TRANSPORT
            else:
                self.lambda_ = DEFAULT_LAMBDA_MMD
        return self

    @property
    def weight(self) -> float:
        return float(self.lambda_ or 0.0)


@dataclass
class Classifier:
    weights: np.ndarray
    bias: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(self.weights.shape[0])

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "Classifier":
        return cls(weights=np.zeros((num_classes, dim)), bias=np.zeros(num_classes))


@dataclass(frozen=True)
class ClassifierGradient:
    weights: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class LossValue:
    total: float
    local_part: float
    phi_part: float
    xent_part: float
    gradient: np.ndarray
    classifier_gradient: ClassifierGradient | None = None


def _uniform(points: np.ndarray) -> DiscreteDistribution:
    return make_distribution(points)


def group_classwise(
    batch: EmbeddingBatch, k: int
) -> tuple[DiscreteDistribution, DiscreteDistribution]:
    positive = batch.labels == k
    if not np.any(positive):
        raise ValueError(f"class {k} is not present in the batch")
    if np.all(positive):
        raise ValueError(f"class {k} is the only class in the batch; negative set is empty")
    return _uniform(batch.vectors[positive]), _uniform(batch.vectors[~positive])


def dcdl_loss(batch: EmbeddingBatch, kind: DiscrepancyKind) -> tuple[float, np.ndarray]:
    classes = batch.present_classes()
    if len(classes) < 2:
        raise ValueError("class-wise discrepancy needs at least two classes in the batch")
    value = 0.0
    grad = np.zeros_like(batch.vectors)
    for k in classes:
        positive = batch.labels == k
        pos, neg = group_classwise(batch, k)
        phi_value, grad_pos, grad_neg = phi_with_gradient(pos, neg, kind)
        value -= phi_value
        grad[positive] -= grad_pos
        grad[~positive] -= grad_neg
    return value, grad


def _squared_distances(vectors: np.ndarray) -> np.ndarray:
    diff = vectors[:, None, :] - vectors[None, :, :]
    return np.sum(diff * diff, axis=-1)


def mine_triplets(labels: np.ndarray, sq_dist: np.ndarray) -> list[tuple[int, int, int]]:
    """Semi-hard negatives per (anchor, positive); hardest negative when none is semi-hard.

    Ties go to the lowest row index.
    """
    triplets: list[tuple[int, int, int]] = []
    n = labels.shape[0]
    for anchor in range(n):
        negatives = np.flatnonzero(labels != labels[anchor])
        if negatives.size == 0:
            continue
        neg_dist = sq_dist[anchor, negatives]
        for positive in range(n):
            if positive == anchor or labels[positive] != labels[anchor]:
                continue
            d_ap = sq_dist[anchor, positive]
            semi_hard = neg_dist > d_ap
            if np.any(semi_hard):
                choice = int(np.argmin(np.where(semi_hard, neg_dist, np.inf)))
            else:
                choice = int(np.argmin(neg_dist))
            triplets.append((anchor, positive, int(negatives[choice])))
    return triplets


def triplet_loss(batch: EmbeddingBatch, tau: float = 0.5) -> tuple[float, np.ndarray]:
    z = batch.vectors
    sq_dist = _squared_distances(z)
    triplets = mine_triplets(batch.labels, sq_dist)
    if not triplets:
        raise ValueError("batch has no valid triplet (need a repeated class and another class)")
    grad = np.zeros_like(z)
    total = 0.0
    for anchor, positive, negative in triplets:
        margin = sq_dist[anchor, positive] - sq_dist[anchor, negative] + tau
        if margin <= 0.0:
            continue
        total += margin
        grad[anchor] += 2.0 * (z[negative] - z[positive])
        grad[positive] += -2.0 * (z[anchor] - z[positive])
        grad[negative] += 2.0 * (z[anchor] - z[negative])
    count = len(triplets)
    return total / count, grad / count


@dataclass(frozen=True)
class PairStructure:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: list[np.ndarray]


def pair_structure(labels: np.ndarray) -> PairStructure:
    """Pair each row with the next row of its class, cyclically in index order.

    Rows of classes with a single member only serve as negatives.
    """
    anchors: list[int] = []
    positives: list[int] = []
    negatives: list[np.ndarray] = []
    for k in np.unique(labels):
        rows = np.flatnonzero(labels == k)
        if rows.size < 2:
            continue
        others = np.flatnonzero(labels != k)
        if others.size == 0:
            raise ValueError(f"anchors of class {int(k)} have no negatives")
        for position, row in enumerate(rows):
            anchors.append(int(row))
            positives.append(int(rows[(position + 1) % rows.size]))
            negatives.append(others)
    if not anchors:
        raise ValueError("no anchor has a positive: every class needs at least two rows")
    order = np.argsort(anchors, kind="stable")
    return PairStructure(
        anchors=np.asarray(anchors)[order],
        positives=np.asarray(positives)[order],
        negatives=[negatives[i] for i in order],
    )


def _softplus_sum(logits: np.ndarray) -> tuple[float, np.ndarray]:
    value = float(logsumexp(np.concatenate([[0.0], logits])))
    return value, np.exp(logits - value)


def npairs_loss(batch: EmbeddingBatch) -> tuple[float, np.ndarray]:
    z = batch.vectors
    pairs = pair_structure(batch.labels)
    grad = np.zeros_like(z)
    total = 0.0
    for anchor, positive, negatives in zip(pairs.anchors, pairs.positives, pairs.negatives):
        za, zp, zn = z[anchor], z[positive], z[negatives]
        value, weights = _softplus_sum(zn @ za - za @ zp)
        total += value
        grad[anchor] += weights @ (zn - zp)
        grad[positive] -= weights.sum() * za
        grad[negatives] += weights[:, None] * za
    count = pairs.anchors.size
    return total / count, grad / count


def _tan_squared(alpha_degrees: float) -> float:
    if not 0.0 < alpha_degrees < 90.0:
        raise ValueError(f"alpha must lie in (0, 90) degrees, got {alpha_degrees}")
    return math.tan(math.radians(alpha_degrees)) ** 2


def angular_loss(batch: EmbeddingBatch, alpha_degrees: float = 30.0) -> tuple[float, np.ndarray]:
    t2 = _tan_squared(alpha_degrees)
    z = batch.vectors
    pairs = pair_structure(batch.labels)
    grad = np.zeros_like(z)
    total = 0.0
    for anchor, positive, negatives in zip(pairs.anchors, pairs.positives, pairs.negatives):
        za, zp, zn = z[anchor], z[positive], z[negatives]
        logits = 4.0 * t2 * (zn @ (za + zp)) - 2.0 * (1.0 + t2) * (za @ zp)
        value, weights = _softplus_sum(logits)
        total += value
        grad[anchor] += weights @ (4.0 * t2 * zn - 2.0 * (1.0 + t2) * zp)
        grad[positive] += weights @ (4.0 * t2 * zn - 2.0 * (1.0 + t2) * za)
        grad[negatives] += weights[:, None] * (4.0 * t2 * (za + zp))
    count = pairs.anchors.size
    return total / count, grad / count


def angular_npairs_loss(
    batch: EmbeddingBatch, alpha_degrees: float = 45.0, lambda_ang: float = 2.0
) -> tuple[float, np.ndarray]:
    np_value, np_grad = npairs_loss(batch)
    if lambda_ang == 0.0:
        return np_value, np_grad
    ang_value, ang_grad = angular_loss(batch, alpha_degrees)
    return np_value + lambda_ang * ang_value, np_grad + lambda_ang * ang_grad


def cross_entropy_loss(
    batch: EmbeddingBatch, classifier: Classifier
) -> tuple[float, np.ndarray, ClassifierGradient]:
    if batch.dim != classifier.weights.shape[1]:
        raise ValueError(
            f"classifier expects dimension {classifier.weights.shape[1]}, got {batch.dim}"
        )
    if batch.size and int(batch.labels.max()) >= classifier.num_classes:
        raise ValueError(
            f"label {int(batch.labels.max())} >= classifier classes {classifier.num_classes}"
        )
    logits = batch.vectors @ classifier.weights.T + classifier.bias
    if not np.all(np.isfinite(logits)):
        raise ValueError("cross entropy logits are not finite")
    log_norm = logsumexp(logits, axis=1)
    rows = np.arange(batch.size)
    value = float(np.mean(log_norm - logits[rows, batch.labels]))
    d_logits = np.exp(logits - log_norm[:, None])
    d_logits[rows, batch.labels] -= 1.0
    d_logits /= batch.size
    grad_z = d_logits @ classifier.weights
    return value, grad_z, ClassifierGradient(
        weights=d_logits.T @ batch.vectors, bias=d_logits.sum(axis=0)
    )


def local_loss(batch: EmbeddingBatch, cfg: LossConfig) -> tuple[float, np.ndarray]:
    if cfg.local == "triplet":
        return triplet_loss(batch, cfg.tau)
    if cfg.local == "npairs":
        return npairs_loss(batch)
    if cfg.local == "angular":
        return angular_loss(batch, cfg.alpha_degrees)
    if cfg.local == "angular_npairs":
        return angular_npairs_loss(batch, cfg.alpha_degrees, cfg.lambda_ang)
    return 0.0, np.zeros_like(batch.vectors)


def train_loss(
    batch: EmbeddingBatch, cfg: LossConfig, classifier: Classifier | None = None
) -> LossValue:
    """Local loss + lambda * class-wise discrepancy loss (+ lambda_xent * cross entropy)."""
    if cfg.use_xent and classifier is None:
        raise ValueError("use_xent requires a classifier")
    if not cfg.use_xent and classifier is not None:
        raise ValueError("classifier given but use_xent is off")
    if cfg.local == "none" and cfg.discrepancy is None and not cfg.use_xent:
        raise ValueError("loss is empty: set local, discrepancy or use_xent")

    local_value, grad = local_loss(batch, cfg)
    grad = grad.copy()

    phi_value = 0.0
    if cfg.discrepancy is not None:
        phi_value, phi_grad = dcdl_loss(batch, cfg.discrepancy)
        grad += cfg.weight * phi_grad

    xent_value = 0.0
    classifier_grad: ClassifierGradient | None = None
    if cfg.use_xent and classifier is not None:
        xent_value, xent_grad, raw_grad = cross_entropy_loss(batch, classifier)
        grad += cfg.lambda_xent * xent_grad
        classifier_grad = ClassifierGradient(
            weights=cfg.lambda_xent * raw_grad.weights, bias=cfg.lambda_xent * raw_grad.bias
        )

    total = local_value + cfg.weight * phi_value + cfg.lambda_xent * xent_value
    return LossValue(
        total=total,
        local_part=local_value,
        phi_part=phi_value,
        xent_part=xent_value,
        gradient=grad,
        classifier_gradient=classifier_grad,
    )
