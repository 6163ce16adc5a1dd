"""Embedding quality metrics: linear probe, KMeans + NMI, Recall@K and the Welch statistic."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from sklearn.metrics import normalized_mutual_info_score

from dcdl.distributions import EmbeddingBatch
from dcdl.losses import Classifier, cross_entropy_loss


logger = logging.getLogger(__name__)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ks: list[int] = Field(default_factory=lambda: [1, 2, 4])
    probe_epochs: int = Field(default=200, ge=1)
    probe_learning_rate: float = Field(default=1.0, gt=0.0)
    kmeans_max_iterations: int = Field(default=300, ge=1)
    kmeans_restarts: int = Field(default=10, ge=1)
    seed: int = 0
    every: int = Field(default=0, ge=0)
    probe_labels: Literal["noisy", "clean"] = "noisy"

    @field_validator("ks", mode="before")
    @classmethod
    def parse_ks(cls, value: object) -> object:
        if isinstance(value, str):
            return [int(item) for item in value.split(",") if item.strip()]
        return value

    @field_validator("ks")
    @classmethod
    def validate_ks(cls, value: list[int]) -> list[int]:
        if not value:
            raise ValueError("ks must not be empty")
        if any(k < 1 for k in value):
            raise ValueError("every k must be >= 1")
        return sorted(set(value))


class EvalReport(BaseModel):
    accuracy: float = Field(ge=0.0, le=1.0)
    nmi: float = Field(ge=0.0, le=1.0)
    recall_at: dict[int, float] = Field(default_factory=dict)
    notes: str = ""

    @field_validator("recall_at")
    @classmethod
    def validate_recall(cls, value: dict[int, float]) -> dict[int, float]:
        for k, recall in value.items():
            if not 0.0 <= recall <= 1.0:
                raise ValueError(f"recall@{k}={recall} is outside [0, 1]")
        return dict(sorted(value.items()))

    def to_records(self) -> list[str]:
        records = [f"accuracy={self.accuracy!r}", f"nmi={self.nmi!r}"]
        records.extend(f"recall@{k}={v!r}" for k, v in self.recall_at.items())
        if self.notes:
            records.append(f"notes={self.notes}")
        return records


def _as_labels(labels: ArrayLike) -> np.ndarray:
    return np.asarray(labels, dtype=np.int64).reshape(-1)


def linear_probe(
    train_embeddings: ArrayLike,
    train_labels: ArrayLike,
    test_embeddings: ArrayLike,
    test_labels: ArrayLike,
    epochs: int = 200,
    learning_rate: float = 1.0,
    num_classes: int | None = None,
) -> float:
    """Full-batch gradient descent on multinomial logistic regression from zero weights."""
    x_train = np.atleast_2d(np.asarray(train_embeddings, dtype=np.float64))
    x_test = np.atleast_2d(np.asarray(test_embeddings, dtype=np.float64))
    y_train = _as_labels(train_labels)
    y_test = _as_labels(test_labels)
    if x_train.shape[0] != y_train.size or x_test.shape[0] != y_test.size:
        raise ValueError("embedding rows and labels differ in length")
    if x_train.shape[1] != x_test.shape[1]:
        raise ValueError(f"train dim {x_train.shape[1]} != test dim {x_test.shape[1]}")
    if np.unique(y_train).size < 2:
        raise ValueError("linear probe needs at least two classes in the training set")
    if y_test.size == 0:
        raise ValueError("linear probe needs a non-empty test set")
    if num_classes is None:
        num_classes = int(max(y_train.max(), y_test.max())) + 1
    batch = EmbeddingBatch(x_train, y_train, num_classes)
    classifier = Classifier.zeros(num_classes, x_train.shape[1])
    for _ in range(epochs):
        _, _, grad = cross_entropy_loss(batch, classifier)
        classifier.weights -= learning_rate * grad.weights
        classifier.bias -= learning_rate * grad.bias
    predictions = np.argmax(x_test @ classifier.weights.T + classifier.bias, axis=1)
    return float(np.mean(predictions == y_test))


@dataclass(frozen=True)
class KMeansResult:
    assignment: np.ndarray
    centers: np.ndarray
    inertia: float
    iterations: int


def _initial_centers(points: np.ndarray, k: int, seed: int | list[int]) -> np.ndarray:
    rng = np.random.default_rng(seed)
    _, distinct = np.unique(points, axis=0, return_index=True)
    pool = np.sort(distinct) if distinct.size >= k else np.arange(points.shape[0])
    chosen = rng.choice(pool, size=k, replace=False)
    return points[chosen].copy()


def kmeans(
    points: ArrayLike, k: int, seed: int = 0, max_iterations: int = 300, restarts: int = 10
) -> KMeansResult:
    """Lloyd iterations from k seeded distinct data points; keeps the lowest-inertia restart."""
    data = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if data.shape[0] < k:
        raise ValueError(f"kmeans needs N >= K, got N={data.shape[0]} K={k}")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    best: KMeans | None = None
    for restart in range(restarts):
        model = KMeans(
            n_clusters=k,
            init=_initial_centers(data, k, [seed, restart]),
            n_init=1,
            max_iter=max_iterations,
            tol=0.0,
            algorithm="lloyd",
        )
        model.fit(data)
        if best is None or model.inertia_ < best.inertia_:
            best = model
    assert best is not None
    return KMeansResult(
        assignment=best.labels_.astype(np.int64),
        centers=best.cluster_centers_,
        inertia=float(best.inertia_),
        iterations=int(best.n_iter_),
    )


def nmi(assignment_a: ArrayLike, assignment_b: ArrayLike) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    a = _as_labels(assignment_a)
    b = _as_labels(assignment_b)
    if a.size != b.size:
        raise ValueError(f"assignment lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("nmi of empty assignments is undefined")
    return float(normalized_mutual_info_score(a, b, average_method="arithmetic"))


def recall_at_k(embeddings: ArrayLike, labels: ArrayLike, ks: list[int]) -> dict[int, float]:
    points = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    y = _as_labels(labels)
    n = points.shape[0]
    if y.size != n:
        raise ValueError(f"{n} embeddings but {y.size} labels")
    if not ks:
        raise ValueError("recall_at_k needs at least one k")
    for k in ks:
        if k < 1 or k >= n:
            raise ValueError(f"recall@{k} needs 1 <= k < N={n}")
    distances = cdist(points, points, "euclidean")
    np.fill_diagonal(distances, np.inf)
    order = np.argsort(distances, axis=1, kind="stable")
    hits = y[order[:, : max(ks)]] == y[:, None]
    first_hit = np.cumsum(hits, axis=1) > 0
    return {k: float(np.mean(first_hit[:, k - 1])) for k in sorted(ks)}


def welch_t(
    mean_a: float, std_a: float, n_a: int, mean_b: float, std_b: float, n_b: int
) -> float:
    if n_a < 2 or n_b < 2:
        raise ValueError(f"welch_t needs at least two samples per group, got {n_a} and {n_b}")
    if std_a < 0.0 or std_b < 0.0:
        raise ValueError("standard deviations must be non-negative")
    difference = mean_a - mean_b
    denominator = math.sqrt(std_a**2 / n_a + std_b**2 / n_b)
    if denominator == 0.0:
        if difference == 0.0:
            raise ValueError("welch_t is 0/0: both variances are zero and the means are equal")
        return math.copysign(math.inf, difference)
    return difference / denominator


def evaluate_embeddings(
    train_embeddings: np.ndarray,
    train_labels: np.ndarray,
    test_embeddings: np.ndarray,
    test_labels: np.ndarray,
    num_classes: int,
    cfg: EvalConfig | None = None,
) -> EvalReport:
    cfg = cfg or EvalConfig()
    notes = []
    accuracy = linear_probe(
        train_embeddings,
        train_labels,
        test_embeddings,
        test_labels,
        epochs=cfg.probe_epochs,
        learning_rate=cfg.probe_learning_rate,
        num_classes=num_classes,
    )
    clusters = min(num_classes, len(test_labels))
    assignment = kmeans(
        test_embeddings, clusters, cfg.seed, cfg.kmeans_max_iterations, cfg.kmeans_restarts
    ).assignment
    nmi_value = nmi(test_labels, assignment)
    usable = [k for k in cfg.ks if k < len(test_labels)]
    if len(usable) < len(cfg.ks):
        notes.append(f"skipped recall for k >= {len(test_labels)}")
    recall = recall_at_k(test_embeddings, test_labels, usable) if usable else {}
    report = EvalReport(
        accuracy=accuracy,
        nmi=min(max(nmi_value, 0.0), 1.0),
        recall_at=recall,
        notes="; ".join(notes),
    )
    logger.info("evaluated %s", " ".join(report.to_records()))
    return report
