"""Command-line front end: ``dcdl <command> [options]``.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 on numerical
failures (an unconverged solve, a diverged run or a failed selftest check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from dcdl.config import get_settings
from dcdl.data import DatasetFormat, NoiseSpec, inject_noise, load_dataset, save_dataset
from dcdl.discrepancy import DiscrepancyKind, phi
from dcdl.distributions import DiscreteDistribution, make_distribution, pairwise_cost
from dcdl.evaluation import EvalConfig, evaluate_embeddings
from dcdl.experiment import (
    ConfigError,
    compare_configs,
    load_config,
    run_experiment,
    write_results,
)
from dcdl.logging_config import configure_logging
from dcdl.metrics import metrics
from dcdl.ot_solver import (
    NumericalError,
    SinkhornConfig,
    exact_ot,
    sinkhorn,
    sinkhorn_divergence,
    transport_cost,
)
from dcdl.selftest import run_selftest
from dcdl.trainer import forward, load_checkpoint


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ValueError(f"{what}: malformed number in {text!r}") from None


def read_points(source: str) -> np.ndarray:
    """Points from a file (one comma-separated point per line) or inline 'x,y;x,y'."""
    path = Path(source)
    if path.is_file():
        rows = []
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                rows.append(_parse_floats(line, f"{path}:{lineno}"))
        what = str(path)
    else:
        rows = [_parse_floats(item, "points") for item in source.split(";") if item.strip()]
        what = "inline points"
    if not rows:
        raise ValueError(f"{what}: no points")
    if len({len(row) for row in rows}) != 1:
        raise ValueError(f"{what}: points have different dimensions")
    return np.asarray(rows, dtype=np.float64)


def read_distribution(points: str, weights: str | None) -> DiscreteDistribution:
    parsed = None if weights is None else _parse_floats(weights, "weights")
    return make_distribution(read_points(points), parsed)


def _sinkhorn_config(args: argparse.Namespace) -> SinkhornConfig:
    settings = get_settings()
    return SinkhornConfig(
        epsilon=args.epsilon if args.epsilon is not None else settings.sinkhorn_epsilon,
        tolerance=args.tolerance if args.tolerance is not None else settings.sinkhorn_tolerance,
        max_iterations=(
            args.max_iterations if args.max_iterations is not None else settings.sinkhorn_max_iterations
        ),
        log_domain=not args.direct,
    )


def _emit(key: str, value: object) -> None:
    if isinstance(value, bool):
        value = "true" if value else "false"
    print(f"{key}={value}")


def cmd_ot(args: argparse.Namespace) -> int:
    a = read_distribution(args.a, args.a_weights)
    b = read_distribution(args.b, args.b_weights)
    cfg = _sinkhorn_config(args)
    cost = pairwise_cost(a, b, args.p, args.scale)
    _emit("epsilon", cfg.epsilon)
    _emit("p", args.p)
    _emit("scale", args.scale)
    if a.size * b.size <= get_settings().oracle_max_cells:
        _, exact = exact_ot(a, b, cost)
        _emit("exact_cost", exact)
    else:
        _emit("exact_cost", "skipped")
    plan = sinkhorn(a, b, cost, cfg)
    _emit("sinkhorn_cost", transport_cost(plan, cost))
    _emit("divergence", sinkhorn_divergence(a, b, args.p, args.scale, cfg))
    _emit("iterations", plan.iterations_used)
    _emit("violation", plan.marginal_violation())
    _emit("converged", plan.converged)
    return EXIT_OK if plan.converged else EXIT_NUMERICAL


def cmd_divergence(args: argparse.Namespace) -> int:
    a = read_distribution(args.a, args.a_weights)
    b = read_distribution(args.b, args.b_weights)
    cfg = _sinkhorn_config(args)
    if args.kind == "sinkhorn_divergence":
        value = sinkhorn_divergence(a, b, args.p, args.scale, cfg)
    else:
        sigma = args.sigma if args.sigma is not None else get_settings().kernel_sigma
        kind = DiscrepancyKind(kind=args.kind, sigma=sigma, p=args.p, scale=args.scale, sinkhorn=cfg)
        value = phi(a, b, kind)
    _emit("kind", args.kind)
    _emit("value", value)
    return EXIT_OK


def _dataset_format(args: argparse.Namespace) -> DatasetFormat:
    return DatasetFormat(delimiter=args.delimiter, label_position=args.label_position)


def cmd_noise(args: argparse.Namespace) -> int:
    fmt = _dataset_format(args)
    dataset = load_dataset(args.dataset, fmt, args.num_classes)
    spec = NoiseSpec(
        kind=args.kind,
        delta=args.delta,
        transition_map=args.map or [],
        seed=args.seed,
    )
    noisy, mask = inject_noise(dataset.labels, spec, dataset.num_classes)
    if args.output:
        save_dataset(dataset.with_labels(noisy), args.output, fmt)
        _emit("output", args.output)
    _emit("kind", spec.kind)
    _emit("delta", spec.delta)
    _emit("changed", int(mask.sum()))
    _emit("total", int(mask.size))
    _emit("rate", float(mask.mean()) if mask.size else 0.0)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set or [])
    run = run_experiment(cfg)
    destination = write_results(run, args.output)
    _emit("results", destination)
    for record in run.report.to_records():
        print(record)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    fmt = _dataset_format(args)
    model = load_checkpoint(args.checkpoint)
    train_set = load_dataset(args.train, fmt, args.num_classes, "train")
    test_set = load_dataset(args.test, fmt, train_set.num_classes, "test")
    cfg = EvalConfig(ks=args.ks, probe_epochs=args.probe_epochs, seed=args.seed)
    report = evaluate_embeddings(
        forward(model, train_set.features).vectors,
        train_set.labels,
        forward(model, test_set.features).vectors,
        test_set.labels,
        train_set.num_classes,
        cfg,
    )
    for record in report.to_records():
        print(record)
    return EXIT_OK


def cmd_selftest(args: argparse.Namespace) -> int:
    results = run_selftest(args.seed, args.check or None)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name} {result.detail} ({result.seconds:.2f}s)")
    failed = sum(not result.passed for result in results)
    print(f"summary passed={len(results) - failed} failed={failed}")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def cmd_compare(args: argparse.Namespace) -> int:
    cfg_a = load_config(args.config_a, args.set_a or [])
    cfg_b = load_config(args.config_b, args.set_b or [])
    seeds = [int(seed) for seed in args.seeds.split(",") if seed.strip()]
    comparison = compare_configs(cfg_a, cfg_b, seeds)
    print("seed,accuracy_a,accuracy_b")
    for seed, acc_a, acc_b in zip(comparison.seeds, comparison.accuracies_a, comparison.accuracies_b):
        print(f"{seed},{acc_a!r},{acc_b!r}")
    mean_a, std_a = comparison.summary_a
    mean_b, std_b = comparison.summary_b
    _emit("mean_a", mean_a)
    _emit("std_a", std_a)
    _emit("mean_b", mean_b)
    _emit("std_b", std_b)
    _emit("wins_b", comparison.wins_b)
    _emit("welch_t", comparison.statistic())
    return EXIT_OK


def _parse_map(text: str) -> list[tuple[int, int]]:
    try:
        pairs = [item.split(":") for item in text.split(",") if item.strip()]
        return [(int(source), int(target)) for source, target in pairs]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected source:target pairs, got {text!r}") from None


def _parse_ks(text: str) -> list[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_distribution_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--a", required=True, help="points file or inline 'x,y;x,y'")
    parser.add_argument("--b", required=True, help="points file or inline 'x,y;x,y'")
    parser.add_argument("--a-weights", default=None, help="comma-separated weights for --a")
    parser.add_argument("--b-weights", default=None, help="comma-separated weights for --b")
    parser.add_argument("--epsilon", type=float, default=None)
    parser.add_argument("--tolerance", type=float, default=None)
    parser.add_argument("--max-iterations", type=int, default=None)
    parser.add_argument("--p", type=float, default=2.0)
    parser.add_argument("--scale", type=float, default=0.5)
    parser.add_argument("--direct", action="store_true", help="direct-domain scaling instead of log domain")


def _add_dataset_format_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--delimiter", default=",")
    parser.add_argument("--label-position", choices=("first", "last"), default="first")
    parser.add_argument("--num-classes", type=int, default=None)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="dcdl", description="Class-wise discrepancy metric learning toolkit")
    parser.add_argument("--metrics", action="store_true", help="print solver and training counters to stderr on exit")
    sub = parser.add_subparsers(dest="command", required=True)

    ot = sub.add_parser("ot", help="solve one transport problem")
    _add_distribution_args(ot)
    ot.set_defaults(handler=cmd_ot)

    divergence = sub.add_parser("divergence", help="evaluate one discrepancy between two samples")
    _add_distribution_args(divergence)
    divergence.add_argument(
        "--kind",
        choices=("mmd_laplacian", "mmd_gaussian", "wasserstein", "energy", "sinkhorn_divergence"),
        default="wasserstein",
    )
    divergence.add_argument("--sigma", type=float, default=None)
    divergence.set_defaults(handler=cmd_divergence)

    noise = sub.add_parser("noise", help="inject label noise into a dataset file")
    noise.add_argument("--dataset", required=True)
    noise.add_argument("--kind", choices=("clean", "symmetric", "asymmetric"), default="symmetric")
    noise.add_argument("--delta", type=float, required=True)
    noise.add_argument("--map", type=_parse_map, default=None, help="asymmetric map as 'src:dst,src:dst'")
    noise.add_argument("--seed", type=int, default=0)
    noise.add_argument("--output", default=None)
    _add_dataset_format_args(noise)
    noise.set_defaults(handler=cmd_noise)

    train = sub.add_parser("train", help="run an experiment config (or re-run a results file)")
    train.add_argument("--config", required=True)
    train.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    train.add_argument("--output", default=None, help="results path (defaults to output.path)")
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on train/test dataset files")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--train", required=True)
    evaluate.add_argument("--test", required=True)
    evaluate.add_argument("--ks", type=_parse_ks, default=[1, 2, 4])
    evaluate.add_argument("--probe-epochs", type=int, default=200)
    evaluate.add_argument("--seed", type=int, default=0)
    _add_dataset_format_args(evaluate)
    evaluate.set_defaults(handler=cmd_eval)

    selftest = sub.add_parser("selftest", help="run the invariant suite")
    selftest.add_argument("--seed", type=int, default=None)
    selftest.add_argument("--check", action="append", help="run only the named check")
    selftest.set_defaults(handler=cmd_selftest)

    compare = sub.add_parser("compare", help="compare two configs over several seeds")
    compare.add_argument("--config-a", required=True)
    compare.add_argument("--config-b", required=True)
    compare.add_argument("--set-a", action="append", metavar="KEY=VALUE")
    compare.add_argument("--set-b", action="append", metavar="KEY=VALUE")
    compare.add_argument("--seeds", default="0,1,2,3,4")
    compare.set_defaults(handler=cmd_compare)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging(get_settings().log_level)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if args.metrics:
            sys.stderr.write(metrics.render())


if __name__ == "__main__":
    sys.exit(main())
