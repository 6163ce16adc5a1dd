"""Datasets: text-file ingestion, synthetic mixtures, label noise and class-balanced batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


logger = logging.getLogger(__name__)

Split = Literal["train", "test"]
NoiseKind = Literal["clean", "symmetric", "asymmetric"]

# airplane=0 automobile=1 bird=2 cat=3 deer=4 dog=5 frog=6 horse=7 ship=8 truck=9
DEFAULT_ASYMMETRIC_MAP: tuple[tuple[int, int], ...] = (
    (9, 1),
    (2, 0),
    (4, 7),
    (3, 5),
    (5, 3),
)

MIN_MEAN_ANGLE_COS = 0.5
MAX_DIRECTION_ATTEMPTS = 1000


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: Split = "train"

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(f"{labels.shape[0]} labels for {features.shape[0]} rows")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if features.shape[0] < self.num_classes:
            raise ValueError(
                f"dataset has {features.shape[0]} rows for {self.num_classes} classes"
            )
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return Dataset(self.features, labels, self.num_classes, self.split)


class DatasetFormat(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    delimiter: str = Field(default=",", min_length=1)
    label_position: Literal["first", "last"] = "first"
    comment: str = Field(default="#", min_length=1)


def load_dataset(
    path: str | Path,
    fmt: DatasetFormat | None = None,
    num_classes: int | None = None,
    split: Split = "train",
) -> Dataset:
    fmt = fmt or DatasetFormat()
    source = Path(path)
    if not source.exists():
        raise ValueError(f"dataset file {source} does not exist")
    labels: list[int] = []
    rows: list[list[float]] = []
    width: int | None = None
    for lineno, raw in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(fmt.comment):
            continue
        fields = [field.strip() for field in line.split(fmt.delimiter)]
        if len(fields) < 2:
            raise ValueError(f"{source}:{lineno}: expected a label and at least one feature")
        label_token = fields[0] if fmt.label_position == "first" else fields[-1]
        feature_tokens = fields[1:] if fmt.label_position == "first" else fields[:-1]
        try:
            label = int(label_token)
        except ValueError:
            raise ValueError(f"{source}:{lineno}: unknown label token {label_token!r}") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ValueError(f"{source}:{lineno}: label {label} out of range")
        if width is None:
            width = len(feature_tokens)
        elif len(feature_tokens) != width:
            raise ValueError(
                f"{source}:{lineno}: expected {width} features, got {len(feature_tokens)}"
            )
        try:
            rows.append([float(token) for token in feature_tokens])
        except ValueError:
            raise ValueError(f"{source}:{lineno}: malformed feature value") from None
        labels.append(label)
    if not rows:
        raise ValueError(f"dataset file {source} has no samples")
    k = num_classes if num_classes is not None else max(labels) + 1
    dataset = Dataset(np.asarray(rows), np.asarray(labels), k, split)
    logger.info("loaded dataset path=%s rows=%s dim=%s classes=%s", source, dataset.size, dataset.dim, k)
    return dataset


def save_dataset(dataset: Dataset, path: str | Path, fmt: DatasetFormat | None = None) -> None:
    fmt = fmt or DatasetFormat()
    lines = [f"{fmt.comment} label{fmt.delimiter}features x{dataset.dim}"]
    for label, row in zip(dataset.labels, dataset.features):
        values = [repr(float(v)) for v in row]
        fields = [str(int(label)), *values] if fmt.label_position == "first" else [*values, str(int(label))]
        lines.append(fmt.delimiter.join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _class_directions(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    directions: list[np.ndarray] = []
    attempts = 0
    while len(directions) < num_classes:
        attempts += 1
        if attempts > MAX_DIRECTION_ATTEMPTS * num_classes:
            raise ValueError(
                f"could not place {num_classes} class means at >= 60 degrees in {dim} dimensions"
            )
        candidate = rng.standard_normal(dim)
        candidate /= np.linalg.norm(candidate)
        if all(float(candidate @ other) <= MIN_MEAN_ANGLE_COS for other in directions):
            directions.append(candidate)
    return np.asarray(directions)


def _mixture_rows(
    num_classes: int, per_class: int, dim: int, separation: float, seed: int
) -> tuple[np.ndarray, np.ndarray, np.random.Generator]:
    if num_classes < 2:
        raise ValueError("synthetic mixtures need at least two classes")
    if per_class < 2:
        raise ValueError("synthetic mixtures need at least two samples per class")
    rng = np.random.default_rng(seed)
    means = separation * _class_directions(rng, num_classes, dim)
    features = np.concatenate(
        [means[k] + rng.standard_normal((per_class, dim)) for k in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes), per_class)
    return features, labels, rng


def synth_gaussian_mixture(
    num_classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    split: Split = "train",
) -> Dataset:
    features, labels, rng = _mixture_rows(num_classes, per_class, dim, separation, seed)
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes, split)


def synth_train_test(
    num_classes: int,
    per_class_train: int,
    per_class_test: int,
    dim: int,
    separation: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    per_class = per_class_train + per_class_test
    features, labels, rng = _mixture_rows(num_classes, per_class, dim, separation, seed)
    in_class = np.tile(np.arange(per_class), num_classes)
    train_rows = rng.permutation(np.flatnonzero(in_class < per_class_train))
    test_rows = rng.permutation(np.flatnonzero(in_class >= per_class_train))
    train = Dataset(features[train_rows], labels[train_rows], num_classes, "train")
    test = Dataset(features[test_rows], labels[test_rows], num_classes, "test")
    return train, test


def split_dataset(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; every class keeps at least one row on each side."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_rows: list[np.ndarray] = []
    test_rows: list[np.ndarray] = []
    for k in range(dataset.num_classes):
        rows = rng.permutation(np.flatnonzero(dataset.labels == k))
        if rows.size < 2:
            raise ValueError(f"class {k} has {rows.size} rows; cannot split")
        n_test = min(max(1, int(round(test_fraction * rows.size))), rows.size - 1)
        test_rows.append(rows[:n_test])
        train_rows.append(rows[n_test:])
    train_idx = np.sort(np.concatenate(train_rows))
    test_idx = np.sort(np.concatenate(test_rows))
    return (
        Dataset(dataset.features[train_idx], dataset.labels[train_idx], dataset.num_classes, "train"),
        Dataset(dataset.features[test_idx], dataset.labels[test_idx], dataset.num_classes, "test"),
    )


class NoiseSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: NoiseKind = "clean"
    delta: float = Field(default=0.0, ge=0.0, le=1.0)
    transition_map: list[tuple[int, int]] = Field(default_factory=list)
    seed: int = 0

    @field_validator("transition_map", mode="before")
    @classmethod
    def parse_transition_map(cls, value: object) -> object:
        if isinstance(value, str):
            pairs = []
            for item in value.split(","):
                item = item.strip()
                if not item:
                    continue
                source, _, target = item.partition(":")
                pairs.append((int(source), int(target)))
            return pairs
        return value

    @model_validator(mode="before")
    @classmethod
    def default_asymmetric_map(cls, data: object) -> object:
        if isinstance(data, dict) and data.get("kind") == "asymmetric":
            if not data.get("transition_map"):
                data = {**data, "transition_map": list(DEFAULT_ASYMMETRIC_MAP)}
        return data

    @model_validator(mode="after")
    def validate_map(self) -> "NoiseSpec":
        if self.kind == "asymmetric" and not self.transition_map:
            raise ValueError("asymmetric noise needs a transition map")
        if self.kind != "asymmetric" and self.transition_map:
            raise ValueError("transition_map is only valid for asymmetric noise")
        sources = [source for source, _ in self.transition_map]
        if len(set(sources)) != len(sources):
            raise ValueError("transition_map lists a source class twice")
        if any(source < 0 or target < 0 for source, target in self.transition_map):
            raise ValueError("transition_map classes must be nonnegative")
        return self


def inject_noise(
    labels: np.ndarray, spec: NoiseSpec, num_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt each label with probability delta; returns (labels, changed mask)."""
    clean = np.asarray(labels, dtype=np.int64).reshape(-1)
    for source, target in spec.transition_map:
        if target >= num_classes or source >= num_classes:
            raise ValueError(f"transition {source}->{target} is outside {num_classes} classes")
    if spec.kind == "clean" or spec.delta == 0.0:
        return clean.copy(), np.zeros(clean.shape, dtype=bool)
    rng = np.random.default_rng(spec.seed)
    corrupt = rng.random(clean.size) < spec.delta
    if spec.kind == "symmetric":
        replacement = rng.integers(0, num_classes, size=clean.size)
    else:
        mapping = np.arange(max(num_classes, int(clean.max(initial=0)) + 1))
        for source, target in spec.transition_map:
            mapping[source] = target
        replacement = mapping[clean]
    noisy = np.where(corrupt, replacement, clean)
    mask = noisy != clean
    logger.info(
        "label noise kind=%s delta=%s changed=%s/%s", spec.kind, spec.delta, int(mask.sum()), clean.size
    )
    return noisy, mask


class BalancedBatchSampler:
    """Class-balanced batches: each batch draws r or more rows from each chosen class.

    Classes rotate round-robin over a per-epoch seeded shuffle; an epoch ends
    once every row has been emitted at least once.
    """

    def __init__(self, labels: np.ndarray, batch_size: int, r: int, seed: int) -> None:
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if r < 1:
            raise ValueError("r must be >= 1")
        if batch_size < r:
            raise ValueError(f"batch_size {batch_size} is smaller than r={r}")
        self.classes = [int(k) for k in np.unique(self.labels)]
        self.rows = {k: np.flatnonzero(self.labels == k) for k in self.classes}
        for k, rows in self.rows.items():
            if rows.size < r:
                raise ValueError(f"class {k} has {rows.size} rows, fewer than r={r}")
        self.batch_size = batch_size
        self.r = r
        self.seed = seed
        self.classes_per_batch = min(batch_size // r, len(self.classes))

    def _quotas(self, chosen: list[int]) -> dict[int, int]:
        quotas = {k: self.r for k in chosen}
        extra = self.batch_size - self.r * len(chosen)
        for slot in range(extra):
            k = chosen[slot % len(chosen)]
            if quotas[k] < self.rows[k].size:
                quotas[k] += 1
        return quotas

    def epoch(self, epoch_index: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch_index])
        pending = {k: list(rng.permutation(self.rows[k])) for k in self.classes}
        covered = {k: False for k in self.classes}
        order = [self.classes[i] for i in rng.permutation(len(self.classes))]
        batches: list[np.ndarray] = []
        cursor = 0
        while not all(covered.values()):
            chosen = [order[(cursor + i) % len(order)] for i in range(self.classes_per_batch)]
            cursor += self.classes_per_batch
            parts: list[np.ndarray] = []
            for k, quota in self._quotas(chosen).items():
                taken = pending[k][:quota]
                pending[k] = pending[k][quota:]
                if not pending[k]:
                    covered[k] = True
                if len(taken) < quota:
                    fresh = list(rng.permutation(self.rows[k]))
                    extra = [row for row in fresh if row not in taken][: quota - len(taken)]
                    pending[k] = [row for row in fresh if row not in extra]
                    taken = taken + extra
                parts.append(np.asarray(taken, dtype=np.int64))
            batches.append(np.concatenate(parts))
        return batches


def balanced_batch(
    dataset: Dataset, batch_size: int, r: int, seed: int, epoch: int, position: int
) -> np.ndarray:
    batches = BalancedBatchSampler(dataset.labels, batch_size, r, seed).epoch(epoch)
    if not 0 <= position < len(batches):
        raise ValueError(f"epoch {epoch} has {len(batches)} batches, no position {position}")
    return batches[position]
