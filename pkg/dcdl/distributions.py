"""Weighted point sets, pairwise transport costs and embedding batches.

All arrays held by these types are float64 / int64 copies flagged read-only,
so values can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial.distance import cdist


WEIGHT_SUM_TOLERANCE = 1e-9
WEIGHT_CLAMP = 1e-12
UNIT_NORM_TOLERANCE = 1e-6

DEFAULT_COST_EXPONENT = 2.0
DEFAULT_COST_SCALE = 0.5


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


def _as_points(points: ArrayLike) -> np.ndarray:
    array = np.asarray(points, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    if array.ndim != 2:
        raise ValueError(f"points must be a list of vectors, got shape {array.shape}")
    return array


@dataclass(frozen=True)
class DiscreteDistribution:
    supports: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        supports = _as_points(self.supports)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if supports.shape[0] == 0:
            raise ValueError("distribution needs at least one support point")
        if supports.shape[1] < 1:
            raise ValueError("support dimension must be >= 1")
        if weights.shape[0] != supports.shape[0]:
            raise ValueError(
                f"weights length {weights.shape[0]} != support count {supports.shape[0]}"
            )
        if not np.all(np.isfinite(supports)):
            raise ValueError("support coordinates must be finite")
        if np.any(weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(float(weights.sum()) - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "supports", _frozen(supports))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def size(self) -> int:
        return int(self.supports.shape[0])

    @property
    def dim(self) -> int:
        return int(self.supports.shape[1])

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


def normalize_weights(weights: ArrayLike) -> np.ndarray:
    """Scale nonnegative weights to sum 1, zeroing entries below 1e-12.

    Weights already summing to 1 (within the clamp) pass through untouched, so
    normalizing twice gives exactly the same array as normalizing once.
    """
    values = np.asarray(weights, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("weights must be non-empty")
    if not np.all(np.isfinite(values)):
        raise ValueError("weights must be finite")
    if np.any(values < 0.0):
        raise ValueError("weights must be nonnegative")
    total = float(values.sum())
    if total <= 0.0:
        raise ValueError("weights must not all be zero")
    if np.all((values == 0.0) | (values >= WEIGHT_CLAMP)) and abs(total - 1.0) <= WEIGHT_CLAMP:
        return values.copy()
    values = values / total
    if np.any(values < WEIGHT_CLAMP):
        values = np.where(values < WEIGHT_CLAMP, 0.0, values)
        values = values / values.sum()
    return values


def make_distribution(
    points: ArrayLike, weights: ArrayLike | None = None
) -> DiscreteDistribution:
    supports = _as_points(points)
    if supports.shape[0] == 0:
        raise ValueError("points must be non-empty")
    if weights is None:
        normalized = np.full(supports.shape[0], 1.0 / supports.shape[0])
    else:
        raw = np.asarray(weights, dtype=np.float64).reshape(-1)
        if raw.shape[0] != supports.shape[0]:
            raise ValueError(
                f"got {raw.shape[0]} weights for {supports.shape[0]} points"
            )
        normalized = normalize_weights(raw)
    return DiscreteDistribution(supports=supports, weights=normalized)


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    p: float = DEFAULT_COST_EXPONENT
    scale: float = DEFAULT_COST_SCALE

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {entries.shape}")
        object.__setattr__(self, "entries", _frozen(entries))

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.entries.shape[0]), int(self.entries.shape[1])


def cost_entries(
    left: np.ndarray, right: np.ndarray, p: float, scale: float
) -> np.ndarray:
    if left.shape[1] != right.shape[1]:
        raise ValueError(
            f"support dimension mismatch: {left.shape[1]} vs {right.shape[1]}"
        )
    if p < 1.0:
        raise ValueError(f"cost exponent p must be >= 1, got {p}")
    if p == 2.0:
        return scale * cdist(left, right, "sqeuclidean")
    return scale * cdist(left, right, "euclidean") ** p


def cost_gradient(
    left: np.ndarray, right: np.ndarray, p: float, scale: float
) -> np.ndarray:
    """d(scale*||u_i - v_j||^p)/du_i as an (n, m, l) array."""
    diff = left[:, None, :] - right[None, :, :]
    if p == 2.0:
        return 2.0 * scale * diff
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(dist > 0.0, scale * p * dist ** (p - 2.0), 0.0)
    if p == 1.0:
        factor = np.where(dist > 1e-12, factor, 0.0)
    return factor[:, :, None] * diff


def pairwise_cost(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    p: float = DEFAULT_COST_EXPONENT,
    scale: float = DEFAULT_COST_SCALE,
) -> CostMatrix:
    return CostMatrix(entries=cost_entries(a.supports, b.supports, p, scale), p=p, scale=scale)


@dataclass(frozen=True)
class EmbeddingBatch:
    """Embedding rows with integer labels.

    The constructor only checks shapes and label ranges so that losses can be
    evaluated off the unit sphere; use make_embedding_batch for trained output.
    """

    vectors: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        labels = np.asarray(self.labels).reshape(-1)
        if vectors.ndim != 2:
            raise ValueError(f"embedding vectors must be 2-D, got shape {vectors.shape}")
        if labels.shape[0] != vectors.shape[0]:
            raise ValueError(
                f"{labels.shape[0]} labels for {vectors.shape[0]} embedding rows"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "vectors", _frozen(vectors))
        object.__setattr__(self, "labels", _frozen(labels))

    @property
    def size(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def present_classes(self) -> list[int]:
        return [int(k) for k in np.unique(self.labels)]

    def with_vectors(self, vectors: ArrayLike) -> "EmbeddingBatch":
        return EmbeddingBatch(vectors=vectors, labels=self.labels, num_classes=self.num_classes)


def make_embedding_batch(
    vectors: ArrayLike, labels: Sequence[int] | np.ndarray, num_classes: int
) -> EmbeddingBatch:
    batch = EmbeddingBatch(vectors=vectors, labels=labels, num_classes=num_classes)
    norms = np.linalg.norm(batch.vectors, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE)
    if bad.size:
        raise ValueError(
            f"embedding row {int(bad[0])} has norm {norms[bad[0]]!r}, expected 1"
        )
    return batch
