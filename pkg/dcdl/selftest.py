"""Invariant checks run by ``dcdl selftest``.

Each check draws its random instances from a generator seeded by the
caller and raises CheckFailed with a short detail on the first violation.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from dcdl.config import get_settings
from dcdl.data import NoiseSpec, inject_noise
from dcdl.discrepancy import DiscrepancyKind, energy_distance, energy_kernel_mmd
from dcdl.distributions import (
    EmbeddingBatch,
    DiscreteDistribution,
    make_distribution,
    pairwise_cost,
)
from dcdl.evaluation import nmi, recall_at_k, welch_t
from dcdl.gradcheck import central_difference, relative_error
from dcdl.losses import (
    Classifier,
    angular_loss,
    angular_npairs_loss,
    cross_entropy_loss,
    dcdl_loss,
    npairs_loss,
    triplet_loss,
)
from dcdl.metrics import metrics
from dcdl.ot_solver import (
    SinkhornConfig,
    envelope_gradient,
    exact_ot,
    regularized_objective,
    sinkhorn,
    sinkhorn_divergence,
    transport_cost,
)


logger = logging.getLogger(__name__)

LOSS_GRADIENT_TOLERANCE = 1e-4
TRANSPORT_GRADIENT_TOLERANCE = 1e-2
ENVELOPE_TOLERANCE = 1e-3
GRADIENT_BATCHES = 20
MARGINAL_TRIALS = 50
LIMIT_TRIALS = 20


class CheckFailed(AssertionError):
    pass


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


CheckFn = Callable[[np.random.Generator], str]
CHECKS: dict[str, CheckFn] = {}


def check(name: str) -> Callable[[CheckFn], CheckFn]:
    def register(fn: CheckFn) -> CheckFn:
        CHECKS[name] = fn
        return fn

    return register


def _require(condition: bool, detail: str) -> None:
    if not condition:
        raise CheckFailed(detail)


def _random_distribution(rng: np.random.Generator, n: int, dim: int, uniform: bool = False) -> DiscreteDistribution:
    points = rng.random((n, dim))
    weights = None if uniform else rng.random(n) + 0.1
    return make_distribution(points, weights)


def _random_batch(rng: np.random.Generator, classes: int = 3, per_class: int = 3, dim: int = 4) -> EmbeddingBatch:
    labels = rng.permutation(np.repeat(np.arange(classes), per_class))
    vectors = rng.standard_normal((labels.size, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return EmbeddingBatch(vectors, labels, classes)


def _two_pair_batch(rng: np.random.Generator, min_gap: float) -> EmbeddingBatch:
    while True:
        batch = _random_batch(rng, classes=2, per_class=2, dim=3)
        u = batch.vectors[batch.labels == 0]
        v = batch.vectors[batch.labels == 1]
        if abs(float((u[0] - u[1]) @ (v[1] - v[0]))) >= min_gap:
            return batch


def _gradient_error(
    batch: EmbeddingBatch, loss: Callable[[EmbeddingBatch], tuple[float, np.ndarray]]
) -> float:
    _, analytic = loss(batch)
    numeric = central_difference(lambda z: loss(batch.with_vectors(z))[0], batch.vectors)
    return relative_error(analytic, numeric)


@check("sinkhorn_marginals")
def check_sinkhorn_marginals(rng: np.random.Generator) -> str:
    worst, iterations = 0.0, 0
    for trial in range(MARGINAL_TRIALS):
        epsilon = (2.5e-3, 0.1, 1.0)[trial % 3]
        a = _random_distribution(rng, int(rng.integers(1, 11)), 2)
        b = _random_distribution(rng, int(rng.integers(1, 11)), 2)
        plan = sinkhorn(a, b, pairwise_cost(a, b), SinkhornConfig(epsilon=epsilon))
        _require(plan.converged, f"trial {trial}: no convergence at epsilon={epsilon}")
        violation = plan.marginal_violation()
        _require(violation <= 1e-6, f"trial {trial}: violation {violation:.3e} at epsilon={epsilon}")
        _require(bool(np.all(plan.coupling >= 0.0)), f"trial {trial}: negative coupling entry")
        worst, iterations = max(worst, violation), max(iterations, plan.iterations_used)
    return f"worst violation {worst:.2e}, at most {iterations} iterations"


@check("small_epsilon_limit")
def check_small_epsilon_limit(rng: np.random.Generator) -> str:
    worst = 0.0
    for trial in range(LIMIT_TRIALS):
        a = _random_distribution(rng, int(rng.integers(2, 9)), 2)
        b = _random_distribution(rng, int(rng.integers(2, 9)), 2)
        cost = pairwise_cost(a, b)
        cfg = SinkhornConfig(epsilon=1e-3 * float(cost.entries.max()), max_iterations=50_000)
        _, exact = exact_ot(a, b, cost)
        sharp = transport_cost(sinkhorn(a, b, cost, cfg), cost)
        error = abs(sharp - exact) / max(exact, 1e-12)
        worst = max(worst, error)
        _require(error <= 0.01, f"trial {trial}: sinkhorn {sharp!r} vs exact {exact!r}")
    return f"worst relative gap {worst:.2e}"


@check("large_epsilon_limit")
def check_large_epsilon_limit(rng: np.random.Generator) -> str:
    worst = 0.0
    for trial in range(LIMIT_TRIALS):
        a = _random_distribution(rng, int(rng.integers(2, 8)), 3, uniform=True)
        b = _random_distribution(rng, int(rng.integers(2, 8)), 3, uniform=True)
        divergence = sinkhorn_divergence(a, b, cfg=SinkhornConfig(epsilon=1e6))
        energy = energy_distance(a, b)
        error = abs(divergence - energy) / max(abs(energy), 1e-12)
        worst = max(worst, error)
        _require(error <= 1e-4, f"trial {trial}: divergence {divergence!r} vs energy {energy!r}")
    return f"worst relative gap {worst:.2e}"


@check("kernel_duality")
def check_kernel_duality(rng: np.random.Generator) -> str:
    for trial in range(LIMIT_TRIALS):
        a = _random_distribution(rng, int(rng.integers(1, 8)), 3, uniform=True)
        b = _random_distribution(rng, int(rng.integers(1, 8)), 3, uniform=True)
        energy = energy_distance(a, b)
        kernel = energy_kernel_mmd(a, b)
        _require(abs(energy - kernel) <= 1e-12 * max(1.0, abs(energy)), f"trial {trial}: {energy!r} vs {kernel!r}")
    return "energy distance equals the -D^p kernel expansion"


@check("local_loss_gradients")
def check_local_loss_gradients(rng: np.random.Generator) -> str:
    losses: dict[str, Callable[[EmbeddingBatch], tuple[float, np.ndarray]]] = {
        "triplet": triplet_loss,
        "npairs": npairs_loss,
        "angular": angular_loss,
        "angular_npairs": lambda batch: angular_npairs_loss(batch, 45.0, 2.0),
    }
    worst = 0.0
    for name, loss in losses.items():
        for _ in range(GRADIENT_BATCHES):
            error = _gradient_error(_random_batch(rng), loss)
            worst = max(worst, error)
            _require(error <= LOSS_GRADIENT_TOLERANCE, f"{name}: relative error {error:.2e}")
    return f"worst relative error {worst:.2e}"


@check("cross_entropy_gradient")
def check_cross_entropy_gradient(rng: np.random.Generator) -> str:
    batch = _random_batch(rng)
    classifier = Classifier(rng.standard_normal((3, batch.dim)), rng.standard_normal(3))
    _, grad_z, grad_c = cross_entropy_loss(batch, classifier)
    numeric_z = central_difference(
        lambda z: cross_entropy_loss(batch.with_vectors(z), classifier)[0], batch.vectors
    )
    numeric_w = central_difference(
        lambda w: cross_entropy_loss(batch, Classifier(w, classifier.bias))[0], classifier.weights
    )
    errors = (relative_error(grad_z, numeric_z), relative_error(grad_c.weights, numeric_w))
    _require(max(errors) <= LOSS_GRADIENT_TOLERANCE, f"relative errors {errors}")
    return f"relative errors {max(errors):.2e}"


@check("mmd_gradient")
def check_mmd_gradient(rng: np.random.Generator) -> str:
    worst = 0.0
    for kind in ("mmd_laplacian", "mmd_gaussian"):
        discrepancy = DiscrepancyKind(kind=kind, sigma=0.5)
        for _ in range(GRADIENT_BATCHES):
            error = _gradient_error(_random_batch(rng), lambda batch: dcdl_loss(batch, discrepancy))
            worst = max(worst, error)
            _require(error <= LOSS_GRADIENT_TOLERANCE, f"{kind}: relative error {error:.2e}")
    return f"worst relative error {worst:.2e}"


@check("transport_gradient")
def check_transport_gradient(rng: np.random.Generator) -> str:
    discrepancy = DiscrepancyKind(
        kind="wasserstein", sinkhorn=SinkhornConfig(epsilon=0.01, tolerance=1e-11)
    )
    worst = 0.0
    for _ in range(GRADIENT_BATCHES):
        error = _gradient_error(_two_pair_batch(rng, 0.3), lambda b: dcdl_loss(b, discrepancy))
        worst = max(worst, error)
        _require(error <= TRANSPORT_GRADIENT_TOLERANCE, f"relative error {error:.2e}")
    return f"worst relative error {worst:.2e}"


@check("envelope_gradient")
def check_envelope_gradient(rng: np.random.Generator) -> str:
    cfg = SinkhornConfig(epsilon=0.5, tolerance=1e-12, max_iterations=100_000)
    a = _random_distribution(rng, 4, 2)
    b = _random_distribution(rng, 5, 2)

    def objective(supports: np.ndarray) -> float:
        moved = DiscreteDistribution(supports, a.weights)
        cost = pairwise_cost(moved, b)
        return regularized_objective(sinkhorn(moved, b, cost, cfg), cost, cfg.epsilon)

    cost = pairwise_cost(a, b)
    grad_a, _ = envelope_gradient(sinkhorn(a, b, cost, cfg), a, b, cost)
    error = relative_error(grad_a, central_difference(objective, a.supports))
    _require(error <= ENVELOPE_TOLERANCE, f"relative error {error:.2e}")
    return f"relative error {error:.2e}"


def _brute_force_triplet(batch: EmbeddingBatch, tau: float) -> float:
    z, labels = batch.vectors, batch.labels
    total, count = 0.0, 0
    for anchor, positive in itertools.permutations(range(batch.size), 2):
        if labels[anchor] != labels[positive]:
            continue
        d_ap = float(np.sum((z[anchor] - z[positive]) ** 2))
        candidates = [
            (float(np.sum((z[anchor] - z[n]) ** 2)), n)
            for n in range(batch.size)
            if labels[n] != labels[anchor]
        ]
        if not candidates:
            continue
        semi_hard = [item for item in candidates if item[0] > d_ap]
        d_an, _ = min(semi_hard or candidates)
        total += max(d_ap - d_an + tau, 0.0)
        count += 1
    return total / count


def _cyclic_pairs(labels: np.ndarray) -> list[tuple[int, int, list[int]]]:
    triples = []
    for anchor in range(labels.size):
        same = [row for row in range(labels.size) if labels[row] == labels[anchor]]
        if len(same) < 2:
            continue
        positive = same[(same.index(anchor) + 1) % len(same)]
        negatives = [row for row in range(labels.size) if labels[row] != labels[anchor]]
        triples.append((anchor, positive, negatives))
    return triples


def _brute_force_npairs(batch: EmbeddingBatch) -> float:
    z = batch.vectors
    terms = [
        math.log(1.0 + sum(math.exp(float(z[a] @ z[n] - z[a] @ z[p])) for n in negatives))
        for a, p, negatives in _cyclic_pairs(batch.labels)
    ]
    return sum(terms) / len(terms)


def _brute_force_angular(batch: EmbeddingBatch, alpha_degrees: float) -> float:
    z = batch.vectors
    t2 = math.tan(math.radians(alpha_degrees)) ** 2
    terms = []
    for a, p, negatives in _cyclic_pairs(batch.labels):
        inner = sum(
            math.exp(float(4.0 * t2 * (z[a] + z[p]) @ z[n] - 2.0 * (1.0 + t2) * z[a] @ z[p]))
            for n in negatives
        )
        terms.append(math.log(1.0 + inner))
    return sum(terms) / len(terms)


def _brute_force_recall(points: np.ndarray, labels: np.ndarray, k: int) -> float:
    hits = 0
    for query in range(points.shape[0]):
        ranked = sorted(
            (float(np.linalg.norm(points[query] - points[other])), other)
            for other in range(points.shape[0])
            if other != query
        )
        hits += any(labels[other] == labels[query] for _, other in ranked[:k])
    return hits / points.shape[0]


@check("brute_force_oracles")
def check_brute_force_oracles(rng: np.random.Generator) -> str:
    for trial in range(5):
        batch = _random_batch(rng, classes=3, per_class=4)
        references = {
            "triplet": (triplet_loss(batch, 0.5)[0], _brute_force_triplet(batch, 0.5)),
            "npairs": (npairs_loss(batch)[0], _brute_force_npairs(batch)),
            "angular": (angular_loss(batch, 30.0)[0], _brute_force_angular(batch, 30.0)),
        }
        for name, (value, reference) in references.items():
            _require(abs(value - reference) <= 1e-12, f"trial {trial}: {name} {value!r} vs {reference!r}")
        recall = recall_at_k(batch.vectors, batch.labels, [1, 2, 4])
        for k, got in recall.items():
            expected = _brute_force_recall(batch.vectors, batch.labels, k)
            _require(abs(got - expected) <= 1e-12, f"trial {trial}: recall@{k} {got!r} vs {expected!r}")
    return "triplet, npairs, angular and recall match exhaustive references"


@check("noise_statistics")
def check_noise_statistics(rng: np.random.Generator) -> str:
    labels = rng.integers(0, 10, size=10_000)
    spec = NoiseSpec(kind="symmetric", delta=0.3, seed=int(rng.integers(2**31)))
    _, mask = inject_noise(labels, spec, 10)
    expected = 0.3 * 0.9
    sigma = np.sqrt(expected * (1.0 - expected) / labels.size)
    rate = float(mask.mean())
    _require(abs(rate - expected) <= 3.0 * sigma, f"symmetric changed fraction {rate:.4f}")
    asymmetric = NoiseSpec(kind="asymmetric", delta=0.2, seed=int(rng.integers(2**31)))
    noisy, changed = inject_noise(labels, asymmetric, 10)
    sources = {source for source, _ in asymmetric.transition_map}
    _require(set(np.unique(labels[changed])) <= sources, "asymmetric noise changed an unmapped class")
    mapping = dict(asymmetric.transition_map)
    _require(
        all(noisy[i] == mapping[int(labels[i])] for i in np.flatnonzero(changed)),
        "asymmetric noise used a target outside the map",
    )
    return f"symmetric changed fraction {rate:.4f}"


@check("metric_sanity")
def check_metric_sanity(rng: np.random.Generator) -> str:
    labels = rng.integers(0, 4, size=40)
    _require(abs(nmi(labels, (labels + 1) % 4) - 1.0) <= 1e-12, "nmi of a relabeled clustering is not 1")
    t = welch_t(1.0, 1.0, 4, 0.0, 1.0, 4)
    _require(abs(t - 1.414214) <= 1e-6, f"welch_t hand case gave {t!r}")
    points = rng.standard_normal((12, 3))
    recall = recall_at_k(points, labels[:12], [1, 2, 3, 4, 5])
    values = list(recall.values())
    _require(all(x <= y for x, y in zip(values, values[1:])), f"recall not monotone: {values}")
    return "nmi, welch_t and recall monotonicity hold"


def run_selftest(seed: int | None = None, names: list[str] | None = None) -> list[CheckResult]:
    seed = get_settings().selftest_seed if seed is None else seed
    selected = names or list(CHECKS)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise ValueError(f"unknown selftest checks: {', '.join(unknown)}")
    results: list[CheckResult] = []
    order = list(CHECKS)
    for name in selected:
        rng = np.random.default_rng([seed, order.index(name)])
        started = time.perf_counter()
        try:
            detail = CHECKS[name](rng)
            passed = True
        except Exception as exc:
            detail = str(exc) if isinstance(exc, CheckFailed) else f"{type(exc).__name__}: {exc}"
            passed = False
            metrics.inc("selftest_failures_total")
            logger.warning("selftest check failed name=%s detail=%s", name, detail)
        results.append(CheckResult(name, passed, detail, time.perf_counter() - started))
    return results
