import math

import numpy as np
import pytest

from dcdl.discrepancy import (
    DiscrepancyKind,
    energy_distance,
    energy_gradient,
    energy_kernel_mmd,
    kernel_eval,
    kernel_matrix,
    mmd,
    mmd_gradient,
    phi,
    phi_with_gradient,
)
from dcdl.distributions import make_distribution
from dcdl.gradcheck import central_difference, relative_error
from dcdl.ot_solver import NumericalError, SinkhornConfig


LAPLACIAN = DiscrepancyKind(kind="mmd_laplacian", sigma=0.05)
GAUSSIAN = DiscrepancyKind(kind="mmd_gaussian", sigma=0.05)


def _random_pair(rng, n=6, m=6, dim=3, uniform=True):
    a = make_distribution(rng.standard_normal((n, dim)), None if uniform else rng.random(n) + 0.1)
    b = make_distribution(rng.standard_normal((m, dim)), None if uniform else rng.random(m) + 0.1)
    return a, b


def test_default_kind_uses_settings_sigma():
    kind = DiscrepancyKind()
    assert kind.kind == "wasserstein"
    assert kind.sigma == 0.05
    assert not kind.is_mmd


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        DiscrepancyKind(kind="mmd_laplacian", sigma=0.0)


def test_kernel_values_at_sigma():
    u, v = [0.0, 0.0], [0.05, 0.0]
    assert kernel_eval(LAPLACIAN, u, u) == 1.0
    assert kernel_eval(GAUSSIAN, u, u) == 1.0
    assert kernel_eval(LAPLACIAN, u, v) == pytest.approx(math.exp(-1.0), abs=1e-6)
    assert kernel_eval(GAUSSIAN, u, v) == pytest.approx(math.exp(-0.5), abs=1e-6)


def test_transport_kind_has_no_pointwise_kernel():
    with pytest.raises(ValueError):
        kernel_eval(DiscrepancyKind(kind="wasserstein"), [0.0], [1.0])
    with pytest.raises(ValueError):
        kernel_matrix(DiscrepancyKind(kind="energy"), [[0.0]], [[1.0]])


def test_mmd_of_identical_samples_is_zero():
    rng = np.random.default_rng(0)
    a, _ = _random_pair(rng)
    assert abs(mmd(a, a, LAPLACIAN)) <= 1e-12


def test_mmd_of_singletons_at_sigma():
    a = make_distribution([[0.0, 0.0]])
    b = make_distribution([[0.05, 0.0]])
    assert mmd(a, b, LAPLACIAN) == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-6)


def test_mmd_matches_double_loop():
    rng = np.random.default_rng(1)
    a, b = _random_pair(rng)
    for kind in (DiscrepancyKind(kind="mmd_laplacian", sigma=1.0), DiscrepancyKind(kind="mmd_gaussian", sigma=1.0)):
        def k(u, v):
            return kernel_eval(kind, u, v)

        n, m = a.size, b.size
        expected = (
            sum(k(u, w) for u in a.supports for w in a.supports) / n**2
            - 2.0 * sum(k(u, v) for u in a.supports for v in b.supports) / (n * m)
            + sum(k(v, w) for v in b.supports for w in b.supports) / m**2
        )
        assert mmd(a, b, kind) == pytest.approx(expected, abs=1e-12)


def test_mmd_ignores_weights_and_counts_duplicates():
    a = make_distribution([[0.0], [1.0]], [0.9, 0.1])
    b = make_distribution([[0.0], [1.0]])
    kind = DiscrepancyKind(kind="mmd_gaussian", sigma=0.5)
    assert mmd(a, b, kind) == pytest.approx(0.0, abs=1e-12)
    duplicated = make_distribution([[0.0], [0.0], [1.0]])
    assert mmd(duplicated, b, kind) > 1e-6


def test_energy_distance_examples():
    a = make_distribution([[0.0, 0.0]])
    b = make_distribution([[3.0, 4.0]])
    assert energy_distance(a, a) == 0.0
    assert energy_distance(a, b) == pytest.approx(0.5 * 25.0)
    assert energy_distance(a, b, p=1.0, scale=1.0) == pytest.approx(5.0)


def test_energy_distance_matches_weighted_kernel_form():
    rng = np.random.default_rng(2)
    a, b = _random_pair(rng, 4, 5, uniform=False)
    d = lambda x, y: 0.5 * float(np.sum((x - y) ** 2))
    cross = sum(wa * wb * d(u, v) for u, wa in zip(a.supports, a.weights) for v, wb in zip(b.supports, b.weights))
    self_a = sum(wa * wb * d(u, v) for u, wa in zip(a.supports, a.weights) for v, wb in zip(a.supports, a.weights))
    self_b = sum(wa * wb * d(u, v) for u, wa in zip(b.supports, b.weights) for v, wb in zip(b.supports, b.weights))
    assert energy_distance(a, b) == pytest.approx(cross - (self_a + self_b) / 2.0, abs=1e-12)


def test_energy_distance_equals_negative_power_kernel_expansion():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = _random_pair(rng, int(rng.integers(1, 7)), int(rng.integers(1, 7)))
        assert energy_kernel_mmd(a, b) == pytest.approx(energy_distance(a, b), abs=1e-12)


def test_discrepancies_are_nonnegative_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = _random_pair(rng, 5, 4)
        assert mmd(a, b, LAPLACIAN) >= -1e-12
        assert mmd(a, b, GAUSSIAN) >= -1e-12
        assert energy_distance(a, b) >= -1e-9


@pytest.mark.parametrize("name", ["mmd_laplacian", "mmd_gaussian", "energy", "wasserstein"])
def test_phi_is_symmetric(name):
    rng = np.random.default_rng(5)
    a, b = _random_pair(rng, 5, 4)
    kind = DiscrepancyKind(
        kind=name, sigma=0.5, sinkhorn=SinkhornConfig(epsilon=0.1, tolerance=1e-12, max_iterations=100_000)
    )
    assert phi(a, b, kind) == pytest.approx(phi(b, a, kind), abs=1e-9)


def test_phi_of_identical_inputs():
    rng = np.random.default_rng(6)
    a, _ = _random_pair(rng)
    assert abs(phi(a, a, LAPLACIAN)) <= 1e-12
    transport = DiscrepancyKind(kind="wasserstein", sinkhorn=SinkhornConfig(epsilon=1e-3))
    single = make_distribution([[0.5, 0.5, 0.5]])
    assert phi(single, single, transport) == 0.0


def test_phi_transport_on_forced_plan():
    a = make_distribution([[0.0], [1.0]])
    b = make_distribution([[2.0]])
    assert phi(a, b, DiscrepancyKind(kind="wasserstein")) == pytest.approx(1.25)


@pytest.mark.parametrize("kind", [DiscrepancyKind(kind="mmd_laplacian", sigma=0.5), DiscrepancyKind(kind="mmd_gaussian", sigma=0.5)])
def test_mmd_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    a, b = _random_pair(rng, 4, 5)
    value, grad_a, grad_b = mmd_gradient(a, b, kind)
    assert value == pytest.approx(mmd(a, b, kind))
    numeric_a = central_difference(lambda x: mmd(make_distribution(x), b, kind), a.supports)
    numeric_b = central_difference(lambda x: mmd(a, make_distribution(x), kind), b.supports)
    assert relative_error(grad_a, numeric_a) <= 1e-4
    assert relative_error(grad_b, numeric_b) <= 1e-4


def test_laplacian_gradient_is_zero_at_coincident_points():
    a = make_distribution([[0.0, 0.0]])
    _, grad_a, grad_b = mmd_gradient(a, a, LAPLACIAN)
    assert np.all(np.isfinite(grad_a))
    assert np.all(grad_a == 0.0)
    assert np.all(grad_b == 0.0)


def test_energy_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    a, b = _random_pair(rng, 4, 3, uniform=False)
    _, grad_a, grad_b = energy_gradient(a, b)
    numeric_a = central_difference(
        lambda x: energy_distance(make_distribution(x, a.weights), b), a.supports
    )
    numeric_b = central_difference(
        lambda x: energy_distance(a, make_distribution(x, b.weights)), b.supports
    )
    assert relative_error(grad_a, numeric_a) <= 1e-6
    assert relative_error(grad_b, numeric_b) <= 1e-6


def test_phi_with_gradient_dispatches_per_kind():
    rng = np.random.default_rng(9)
    a, b = _random_pair(rng, 3, 3)
    for kind in (LAPLACIAN, DiscrepancyKind(kind="energy"), DiscrepancyKind(kind="wasserstein", sinkhorn=SinkhornConfig(epsilon=0.1))):
        value, grad_a, grad_b = phi_with_gradient(a, b, kind)
        assert value == pytest.approx(phi(a, b, kind), abs=1e-9)
        assert grad_a.shape == a.supports.shape
        assert grad_b.shape == b.supports.shape


def test_unconverged_transport_plan_is_not_differentiated():
    rng = np.random.default_rng(10)
    a, b = _random_pair(rng, 6, 6)
    kind = DiscrepancyKind(kind="wasserstein", sinkhorn=SinkhornConfig(epsilon=1e-3, max_iterations=1))
    with pytest.raises(NumericalError, match="did not converge"):
        phi_with_gradient(a, b, kind)


def test_dimension_mismatch_is_rejected():
    a = make_distribution([[0.0, 0.0]])
    b = make_distribution([[0.0]])
    with pytest.raises(ValueError):
        mmd(a, b, LAPLACIAN)
    with pytest.raises(ValueError):
        energy_distance(a, b)
