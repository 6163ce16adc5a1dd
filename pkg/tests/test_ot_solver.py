import itertools

import numpy as np
import pytest

from dcdl.discrepancy import energy_distance
from dcdl.distributions import CostMatrix, make_distribution, pairwise_cost
from dcdl.metrics import metrics
from dcdl.ot_solver import (
    NumericalError,
    SinkhornConfig,
    TransportPlan,
    _epsilon_schedule,
    entropic_cost,
    exact_ot,
    regularized_objective,
    sinkhorn,
    sinkhorn_divergence,
    transport_cost,
)


def _plan(coupling):
    coupling = np.asarray(coupling, dtype=float)
    return TransportPlan(
        coupling=coupling,
        row_marginal=coupling.sum(axis=1),
        col_marginal=coupling.sum(axis=0),
        iterations_used=0,
        converged=True,
    )


def _random_instance(rng, n, m, dim=2, uniform=False):
    a = make_distribution(rng.random((n, dim)), None if uniform else rng.random(n) + 0.1)
    b = make_distribution(rng.random((m, dim)), None if uniform else rng.random(m) + 0.1)
    return a, b


def test_single_point_plan_is_forced():
    a = make_distribution([[0.0]])
    b = make_distribution([[3.0]])
    plan = sinkhorn(a, b, pairwise_cost(a, b))
    assert plan.coupling.tolist() == [[1.0]]
    assert plan.converged
    assert plan.iterations_used == 1


@pytest.mark.parametrize("epsilon", [2.5e-3, 0.1, 10.0])
def test_marginals_force_split_plan(epsilon):
    a = make_distribution([[0.0], [1.0]])
    b = make_distribution([[2.0]])
    cost = pairwise_cost(a, b)
    plan = sinkhorn(a, b, cost, SinkhornConfig(epsilon=epsilon))
    assert np.allclose(plan.coupling, [[0.5], [0.5]], atol=1e-12)
    assert transport_cost(plan, cost) == pytest.approx(1.25)


def test_default_config_reads_settings():
    cfg = SinkhornConfig()
    assert cfg.epsilon == 2.5e-3
    assert cfg.tolerance == 1e-6
    assert cfg.max_iterations == 10_000
    assert cfg.log_domain


def test_config_rejects_nonpositive_values():
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        SinkhornConfig(tolerance=-1.0)
    with pytest.raises(ValueError):
        SinkhornConfig(max_iterations=0)


def test_sinkhorn_checks_shapes_and_finiteness():
    a = make_distribution([[0.0], [1.0]])
    b = make_distribution([[2.0]])
    with pytest.raises(ValueError):
        sinkhorn(a, b, CostMatrix(np.zeros((1, 1))))
    with pytest.raises(ValueError):
        sinkhorn(a, b, CostMatrix(np.array([[np.inf], [0.0]])))


def test_converged_plans_are_feasible_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(50):
        epsilon = (2.5e-3, 0.1, 1.0)[trial % 3]
        a, b = _random_instance(rng, int(rng.integers(1, 11)), int(rng.integers(1, 11)))
        plan = sinkhorn(a, b, pairwise_cost(a, b), SinkhornConfig(epsilon=epsilon))
        assert np.all(plan.coupling >= 0.0)
        if plan.converged:
            assert plan.marginal_violation() <= 1e-6


def test_default_epsilon_converges_on_class_vs_rest_batches():
    rng = np.random.default_rng(11)
    for _ in range(5):
        rows = rng.standard_normal((50, 8))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        a, b = make_distribution(rows[:10]), make_distribution(rows[10:])
        plan = sinkhorn(a, b, pairwise_cost(a, b))
        assert plan.converged
        assert plan.marginal_violation() <= 1e-6
        assert plan.iterations_used < 2_000


def test_epsilon_schedule_anneals_down_to_the_target():
    schedule = _epsilon_schedule(2.5e-3, np.array([[0.0, 2.0]]))
    assert schedule[0] == 2.0
    assert schedule[-1] == 2.5e-3
    assert all(later < earlier for earlier, later in zip(schedule, schedule[1:]))
    assert _epsilon_schedule(10.0, np.array([[0.0, 2.0]])) == [10.0]


def test_zero_weight_points_get_empty_rows():
    a = make_distribution([[0.0], [5.0]], [1.0, 0.0])
    b = make_distribution([[1.0], [2.0]])
    plan = sinkhorn(a, b, pairwise_cost(a, b))
    assert plan.converged
    assert plan.coupling[1].tolist() == [0.0, 0.0]
    assert np.allclose(plan.coupling[0], [0.5, 0.5])


def test_log_and_direct_domains_agree_for_moderate_epsilon():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = _random_instance(rng, 5, 4)
        cost = pairwise_cost(a, b)
        log_plan = sinkhorn(a, b, cost, SinkhornConfig(epsilon=0.1, tolerance=1e-12))
        direct_plan = sinkhorn(a, b, cost, SinkhornConfig(epsilon=0.1, tolerance=1e-12, log_domain=False))
        assert np.allclose(log_plan.coupling, direct_plan.coupling, atol=1e-8, rtol=0.0)


def test_direct_domain_overflow_is_a_numerical_error():
    a = make_distribution([[0.0]])
    b = make_distribution([[10.0]])
    cfg = SinkhornConfig(epsilon=1e-3, log_domain=False)
    with pytest.raises(NumericalError):
        sinkhorn(a, b, pairwise_cost(a, b), cfg)


def test_nonconvergence_is_reported_and_counted(caplog):
    metrics.reset()
    rng = np.random.default_rng(2)
    a, b = _random_instance(rng, 6, 6)
    plan = sinkhorn(a, b, pairwise_cost(a, b), SinkhornConfig(epsilon=1e-3, max_iterations=1))
    assert not plan.converged
    assert plan.iterations_used == 1
    counters = metrics.snapshot()
    assert counters["sinkhorn_solves_total"] == 1
    assert counters["sinkhorn_nonconverged_total"] == 1
    assert "did not converge" in caplog.text


def test_transport_cost_examples():
    assert transport_cost(_plan([[1.0]]), CostMatrix([[2.0]])) == 2.0
    assert transport_cost(_plan(np.eye(2) / 2), CostMatrix([[0.0, 1.0], [1.0, 0.0]])) == 0.0
    assert transport_cost(_plan([[0.5], [0.5]]), CostMatrix([[2.0], [0.5]])) == pytest.approx(1.25)
    with pytest.raises(ValueError):
        transport_cost(_plan([[1.0]]), CostMatrix([[1.0, 2.0]]))


def test_regularized_objective_examples():
    assert regularized_objective(_plan([[1.0]]), CostMatrix([[2.0]]), 0.1) == pytest.approx(1.9)
    plan = _plan([[0.5, 0.0], [0.0, 0.5]])
    cost = CostMatrix([[1.0, 3.0], [3.0, 1.0]])
    assert regularized_objective(plan, cost, 0.0) == transport_cost(plan, cost)
    assert np.isfinite(regularized_objective(plan, cost, 0.5))


def test_exact_ot_examples():
    a = make_distribution([[0.0]])
    b = make_distribution([[1.5]])
    _, value = exact_ot(a, b, pairwise_cost(a, b))
    assert value == pytest.approx(1.125)

    a = make_distribution([[0.0], [1.0]])
    _, value = exact_ot(a, a, pairwise_cost(a, a))
    assert value == pytest.approx(0.0, abs=1e-12)

    b = make_distribution([[3.0], [4.0]])
    plan, value = exact_ot(a, b, pairwise_cost(a, b))
    assert value == pytest.approx(4.5)
    assert plan.marginal_violation() <= 1e-9


def test_exact_ot_matches_permutation_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a, b = _random_instance(rng, 4, 4, uniform=True)
        cost = pairwise_cost(a, b)
        best = min(
            sum(cost.entries[i, j] for i, j in enumerate(perm)) / 4
            for perm in itertools.permutations(range(4))
        )
        _, value = exact_ot(a, b, cost)
        assert value == pytest.approx(best, abs=1e-9)


def test_exact_ot_refuses_large_instances():
    rng = np.random.default_rng(5)
    a, b = _random_instance(rng, 21, 20)
    with pytest.raises(ValueError, match="limited"):
        exact_ot(a, b, pairwise_cost(a, b))


def test_exact_cost_never_exceeds_entropic_cost():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a, b = _random_instance(rng, int(rng.integers(1, 8)), int(rng.integers(1, 8)))
        cost = pairwise_cost(a, b)
        _, exact = exact_ot(a, b, cost)
        plan = sinkhorn(a, b, cost, SinkhornConfig(epsilon=0.05, tolerance=1e-12, max_iterations=50_000))
        assert exact <= transport_cost(plan, cost) + 1e-9


def test_small_epsilon_matches_exact_cost():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = _random_instance(rng, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        cost = pairwise_cost(a, b)
        cfg = SinkhornConfig(epsilon=1e-3 * float(cost.entries.max()), max_iterations=50_000)
        _, exact = exact_ot(a, b, cost)
        sharp = transport_cost(sinkhorn(a, b, cost, cfg), cost)
        assert abs(sharp - exact) <= 0.01 * exact


def test_divergence_of_identical_inputs_is_zero():
    rng = np.random.default_rng(8)
    a, _ = _random_instance(rng, 6, 1)
    assert abs(sinkhorn_divergence(a, a, cfg=SinkhornConfig(epsilon=0.1))) <= 1e-8


def test_large_epsilon_divergence_matches_energy_distance():
    rng = np.random.default_rng(9)
    for _ in range(20):
        a, b = _random_instance(rng, 4, 4, dim=3, uniform=True)
        divergence = sinkhorn_divergence(a, b, cfg=SinkhornConfig(epsilon=1e6))
        energy = energy_distance(a, b)
        assert divergence == pytest.approx(energy, rel=1e-4)


def test_entropic_cost_returns_sharp_cost_and_plan():
    a = make_distribution([[0.0], [1.0]])
    b = make_distribution([[2.0]])
    value, plan = entropic_cost(a, b, 2.0, 0.5, SinkhornConfig(epsilon=0.1))
    assert value == pytest.approx(1.25)
    assert plan.shape == (2, 1)
