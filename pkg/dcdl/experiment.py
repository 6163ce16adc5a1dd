"""Experiment configuration files, the train-and-evaluate pipeline and results files.

Configuration is line-oriented ``section.key=value`` text. Parsed values are
validated into nested pydantic sections; an empty value means "use the
default". The resolved configuration always dumps back to the same text.

A results file starts with the resolved configuration as ``#`` comment lines,
followed by one CSV record per epoch and the final report as ``# report``
lines. Loading a results file as a configuration reads back its header.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dcdl.config import get_settings
from dcdl.data import (
    Dataset,
    DatasetFormat,
    NoiseSpec,
    inject_noise,
    load_dataset,
    split_dataset,
    synth_train_test,
)
from dcdl.discrepancy import DiscrepancyKind, DiscrepancyName
from dcdl.evaluation import EvalConfig, EvalReport, evaluate_embeddings, welch_t
from dcdl.losses import LocalLossName, LossConfig
from dcdl.ot_solver import SinkhornConfig
from dcdl.trainer import (
    EmbeddingModel,
    ModelSpec,
    OptimizerConfig,
    SamplerConfig,
    TrainingResult,
    forward,
    save_checkpoint,
    train,
)


logger = logging.getLogger(__name__)

RESULTS_MAGIC = "# dcdl-results 1"
REPORT_PREFIX = "# report "
SECTION_SEED_OFFSETS = {"dataset": 0, "noise": 1, "model": 2, "optimizer": 3, "eval": 4}
SECTIONS = ("dataset", "noise", "loss", "model", "optimizer", "sampler", "eval", "output")
TOP_LEVEL_KEYS = ("seed",)


class ConfigError(ValueError):
    def __init__(self, key: str, detail: str):
        self.key = key
        self.detail = detail
        super().__init__(f"{key}: {detail}")


class DatasetSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: str | None = None
    test_path: str | None = None
    delimiter: str = Field(default=",", min_length=1)
    label_position: Literal["first", "last"] = "first"
    num_classes: int | None = Field(default=None, ge=2)
    test_fraction: float = Field(default=0.25, gt=0.0, lt=1.0)
    synth_classes: int = Field(default=5, ge=2)
    synth_train_per_class: int = Field(default=40, ge=2)
    synth_test_per_class: int = Field(default=40, ge=2)
    synth_dim: int = Field(default=16, ge=1)
    synth_separation: float = Field(default=4.0, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def validate_source(self) -> "DatasetSection":
        if self.test_path is not None and self.path is None:
            raise ValueError("test_path requires path")
        return self

    @property
    def file_format(self) -> DatasetFormat:
        return DatasetFormat(delimiter=self.delimiter, label_position=self.label_position)


class LossSection(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    local: LocalLossName = "triplet"
    discrepancy: DiscrepancyName | Literal["none"] = "none"
    lambda_: float | None = Field(default=None, ge=0.0, alias="lambda")
    lambda_xent: float = Field(default=1.0, ge=0.0)
    lambda_ang: float = 2.0
    tau: float = Field(default=0.5, gt=0.0)
    alpha: float = Field(default=30.0, gt=0.0, lt=90.0)
    use_xent: bool = False
    warmup_xent_epochs: int = Field(default=0, ge=0)
    sigma: float = Field(default_factory=lambda: get_settings().kernel_sigma, gt=0.0)
    p: float = Field(default=2.0, ge=1.0)
    scale: float = Field(default=0.5, gt=0.0)
    epsilon: float = Field(default_factory=lambda: get_settings().sinkhorn_epsilon, gt=0.0)
    sinkhorn_tolerance: float = Field(
        default_factory=lambda: get_settings().sinkhorn_tolerance, gt=0.0
    )
    sinkhorn_max_iterations: int = Field(
        default_factory=lambda: get_settings().sinkhorn_max_iterations, ge=1
    )
    log_domain: bool = True

    @model_validator(mode="after")
    def resolve_lambda(self) -> "LossSection":
        self.lambda_ = self.to_loss_config().weight
        return self

    def discrepancy_kind(self) -> DiscrepancyKind | None:
        if self.discrepancy == "none":
            return None
        return DiscrepancyKind(
            kind=self.discrepancy,
            sigma=self.sigma,
            p=self.p,
            scale=self.scale,
            sinkhorn=SinkhornConfig(
                epsilon=self.epsilon,
                tolerance=self.sinkhorn_tolerance,
                max_iterations=self.sinkhorn_max_iterations,
                log_domain=self.log_domain,
            ),
        )

    def to_loss_config(self) -> LossConfig:
        return LossConfig(
            local=self.local,
            discrepancy=self.discrepancy_kind(),
            lambda_=self.lambda_,
            lambda_xent=self.lambda_xent,
            lambda_ang=self.lambda_ang,
            tau=self.tau,
            alpha_degrees=self.alpha,
            use_xent=self.use_xent,
        )


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: str | None = None
    checkpoint: str | None = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetSection = Field(default_factory=DatasetSection)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    loss: LossSection = Field(default_factory=LossSection)
    model: ModelSpec = Field(default_factory=ModelSpec)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output: OutputSection = Field(default_factory=OutputSection)
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def derive_section_seeds(cls, data: Any) -> Any:
        """Sections without an explicit seed derive one from the top-level seed."""
        if not isinstance(data, dict):
            return data
        try:
            base = int(data.get("seed", 0))
        except (TypeError, ValueError):
            return data
        data = dict(data)
        for section, offset in SECTION_SEED_OFFSETS.items():
            values = data.get(section)
            if isinstance(values, BaseModel):
                continue
            values = dict(values or {})
            if values.get("seed") in (None, ""):
                values["seed"] = base + offset
            data[section] = values
        return data


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(
            ":".join(str(part) for part in item) if isinstance(item, (list, tuple)) else str(item)
            for item in value
        )
    return str(value)


def dump_config(cfg: ExperimentConfig, include_output: bool = True) -> list[str]:
    data = cfg.model_dump(by_alias=True)
    lines = []
    for section in SECTIONS:
        if section == "output" and not include_output:
            continue
        for name, value in data[section].items():
            lines.append(f"{section}.{name}={_format_value(value)}")
    lines.extend(f"{key}={_format_value(data[key])}" for key in TOP_LEVEL_KEYS)
    return lines


def parse_config_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}", f"{source}:{lineno}: expected key=value, got {line!r}")
        if key in values:
            raise ConfigError(key, "given more than once")
        values[key] = value.strip()
    return values


def _nest(values: dict[str, str]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in values.items():
        section, dot, name = key.partition(".")
        if not dot:
            if key not in TOP_LEVEL_KEYS:
                raise ConfigError(key, "unknown key")
            if value != "":
                nested[key] = value
            continue
        if section not in SECTIONS:
            raise ConfigError(key, f"unknown section {section!r}")
        if not name or "." in name:
            raise ConfigError(key, "expected section.key")
        section_values = nested.setdefault(section, {})
        if value != "":
            section_values[name] = value
    return nested


def build_config(values: dict[str, str]) -> ExperimentConfig:
    nested = _nest(values)
    try:
        return ExperimentConfig.model_validate(nested)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"]) or "config"
        raise ConfigError(key, error["msg"]) from None


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    lines = text.splitlines()
    if lines and lines[0] == RESULTS_MAGIC:
        lines = results_header(lines)
    return build_config(parse_config_lines(lines, source))


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    source = Path(path)
    if not source.exists():
        raise ConfigError("config", f"{source} does not exist")
    lines = source.read_text(encoding="utf-8").splitlines()
    if lines and lines[0] == RESULTS_MAGIC:
        lines = results_header(lines)
    values = parse_config_lines(lines, str(source))
    values.update(parse_config_lines(overrides, "<overrides>"))
    return build_config(values)


def results_header(lines: list[str]) -> list[str]:
    header = []
    for line in lines[1:]:
        if not line.startswith("# "):
            break
        header.append(line[2:])
    return header


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    values = parse_config_lines(dump_config(cfg))
    for section in SECTION_SEED_OFFSETS:
        values.pop(f"{section}.seed", None)
    values["seed"] = str(seed)
    return build_config(values)


def load_datasets(section: DatasetSection) -> tuple[Dataset, Dataset]:
    if section.path is None:
        return synth_train_test(
            section.synth_classes,
            section.synth_train_per_class,
            section.synth_test_per_class,
            section.synth_dim,
            section.synth_separation,
            section.seed,
        )
    full = load_dataset(section.path, section.file_format, section.num_classes, "train")
    if section.test_path is None:
        return split_dataset(full, section.test_fraction, section.seed)
    test = load_dataset(section.test_path, section.file_format, full.num_classes, "test")
    return full, test


@dataclass
class ExperimentRun:
    config: ExperimentConfig
    report: EvalReport
    training: TrainingResult
    text: str


def _metric_columns(cfg: ExperimentConfig) -> list[str]:
    return ["accuracy", "nmi", *(f"recall@{k}" for k in cfg.eval.ks)]


def _metric_cells(cfg: ExperimentConfig, report: object | None) -> list[str]:
    if not isinstance(report, EvalReport):
        return [""] * len(_metric_columns(cfg))
    cells = [repr(report.accuracy), repr(report.nmi)]
    cells.extend(
        repr(report.recall_at[k]) if k in report.recall_at else "" for k in cfg.eval.ks
    )
    return cells


def format_results(cfg: ExperimentConfig, training: TrainingResult, report: EvalReport) -> str:
    lines = [RESULTS_MAGIC]
    lines.extend(f"# {line}" for line in dump_config(cfg, include_output=False))
    lines.append(
        ",".join(["epoch", "learning_rate", "total", "local", "phi", "xent", "batches", *_metric_columns(cfg)])
    )
    for entry in training.log:
        cells = [
            str(entry.epoch),
            repr(entry.learning_rate),
            repr(entry.total),
            repr(entry.local),
            repr(entry.phi),
            repr(entry.xent),
            str(entry.batches),
        ]
        lines.append(",".join(cells + _metric_cells(cfg, entry.report)))
    lines.extend(f"{REPORT_PREFIX}{record}" for record in report.to_records())
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig) -> ExperimentRun:
    train_set, test_set = load_datasets(cfg.dataset)
    loss_cfg = cfg.loss.to_loss_config()
    noisy_labels, _ = inject_noise(train_set.labels, cfg.noise, train_set.num_classes)
    probe_labels = {"clean": train_set.labels, "noisy": noisy_labels}

    def evaluate(model: EmbeddingModel) -> EvalReport:
        train_z = forward(model, train_set.features).vectors
        test_z = forward(model, test_set.features).vectors
        return evaluate_embeddings(
            train_z,
            probe_labels[cfg.eval.probe_labels],
            test_z,
            test_set.labels,
            train_set.num_classes,
            cfg.eval,
        )

    def periodic(model: EmbeddingModel, epoch: int) -> EvalReport | None:
        if cfg.eval.every and (epoch + 1) % cfg.eval.every == 0:
            return evaluate(model)
        return None

    logger.info(
        "experiment start train=%s test=%s classes=%s loss=%s discrepancy=%s noise=%s",
        train_set.size, test_set.size, train_set.num_classes,
        cfg.loss.local, cfg.loss.discrepancy, cfg.noise.kind,
    )
    training = train(
        train_set,
        cfg.model,
        loss_cfg,
        cfg.optimizer,
        sampler_cfg=cfg.sampler,
        warmup_xent_epochs=cfg.loss.warmup_xent_epochs,
        evaluate=periodic,
        noisy_labels=noisy_labels,
    )
    report = evaluate(training.model)
    if cfg.output.checkpoint:
        save_checkpoint(training.model, cfg.output.checkpoint)
    text = format_results(cfg, training, report)
    logger.info("experiment done %s", " ".join(report.to_records()))
    return ExperimentRun(config=cfg, report=report, training=training, text=text)


def write_results(run: ExperimentRun, path: str | Path | None = None) -> Path:
    target = path or run.config.output.path
    if target is None:
        raise ConfigError("output.path", "no results path given")
    destination = Path(target)
    destination.write_text(run.text, encoding="utf-8")
    return destination


@dataclass
class Comparison:
    seeds: list[int]
    accuracies_a: list[float]
    accuracies_b: list[float]

    @staticmethod
    def _summary(values: list[float]) -> tuple[float, float]:
        array = np.asarray(values)
        return float(array.mean()), float(array.std(ddof=1))

    @property
    def summary_a(self) -> tuple[float, float]:
        return self._summary(self.accuracies_a)

    @property
    def summary_b(self) -> tuple[float, float]:
        return self._summary(self.accuracies_b)

    @property
    def wins_b(self) -> int:
        return sum(b > a for a, b in zip(self.accuracies_a, self.accuracies_b))

    def statistic(self) -> float:
        """Welch t of b against a; NaN when both runs are constant and equal."""
        mean_a, std_a = self.summary_a
        mean_b, std_b = self.summary_b
        if std_a == std_b == 0.0 and mean_a == mean_b:
            return math.nan
        n = len(self.seeds)
        return welch_t(mean_b, std_b, n, mean_a, std_a, n)


def compare_configs(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig, seeds: list[int]) -> Comparison:
    if len(seeds) < 2:
        raise ValueError("compare needs at least two seeds")
    comparison = Comparison(seeds=list(seeds), accuracies_a=[], accuracies_b=[])
    for seed in seeds:
        comparison.accuracies_a.append(run_experiment(with_seed(cfg_a, seed)).report.accuracy)
        comparison.accuracies_b.append(run_experiment(with_seed(cfg_b, seed)).report.accuracy)
        logger.info(
            "compare seed=%s a=%s b=%s", seed, comparison.accuracies_a[-1], comparison.accuracies_b[-1]
        )
    return comparison
