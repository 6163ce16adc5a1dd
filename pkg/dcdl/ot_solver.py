"""Entropic optimal transport (Sinkhorn scaling) and an exact LP oracle."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linprog
from scipy.special import logsumexp, xlogy

from dcdl.config import get_settings
from dcdl.distributions import (
    CostMatrix,
    DiscreteDistribution,
    cost_gradient,
    pairwise_cost,
)
from dcdl.metrics import metrics


logger = logging.getLogger(__name__)

EPSILON_DECAY = 0.2
STAGE_TOLERANCE = 1e-3
STAGE_SWEEPS = 50
NEWTON_AFTER_SWEEPS = 10
LINE_SEARCH_HALVINGS = 30


class NumericalError(RuntimeError):
    """A solve or training run produced non-finite or unusable numbers."""


class SinkhornConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epsilon: float = Field(default_factory=lambda: get_settings().sinkhorn_epsilon, gt=0.0)
    max_iterations: int = Field(
        default_factory=lambda: get_settings().sinkhorn_max_iterations, ge=1
    )
    tolerance: float = Field(
        default_factory=lambda: get_settings().sinkhorn_tolerance, gt=0.0
    )
    log_domain: bool = True


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    iterations_used: int
    converged: bool

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.coupling.shape[0]), int(self.coupling.shape[1])

    def marginal_violation(self) -> float:
        return marginal_violation(self.coupling, self.row_marginal, self.col_marginal)


def marginal_violation(
    coupling: np.ndarray, row_marginal: np.ndarray, col_marginal: np.ndarray
) -> float:
    row_error = float(np.abs(coupling.sum(axis=1) - row_marginal).sum())
    col_error = float(np.abs(coupling.sum(axis=0) - col_marginal).sum())
    return max(row_error, col_error)


def _check_shapes(
    a: DiscreteDistribution, b: DiscreteDistribution, cost: CostMatrix
) -> None:
    if cost.shape != (a.size, b.size):
        raise ValueError(
            f"cost shape {cost.shape} does not match distributions ({a.size}, {b.size})"
        )
    if not np.all(np.isfinite(cost.entries)):
        raise ValueError("cost matrix has non-finite entries")


def _epsilon_schedule(target: float, cost: np.ndarray) -> list[float]:
    schedule = []
    epsilon = max(target, float(cost.max(initial=0.0)))
    while epsilon > target:
        schedule.append(epsilon)
        epsilon *= EPSILON_DECAY
    schedule.append(target)
    return schedule


def _gibbs(f: np.ndarray, g: np.ndarray, cost: np.ndarray, epsilon: float) -> np.ndarray:
    with np.errstate(over="ignore"):
        return np.exp((f[:, None] + g[None, :] - cost) / epsilon)


def _sweep(
    g: np.ndarray, cost: np.ndarray, epsilon: float, log_w: np.ndarray, log_wt: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    f = epsilon * (log_w - logsumexp((g[None, :] - cost) / epsilon, axis=1))
    g = epsilon * (log_wt - logsumexp((f[:, None] - cost) / epsilon, axis=0))
    return f, g


def _dual_objective(
    x: np.ndarray, y: np.ndarray, scaled_cost: np.ndarray, w: np.ndarray, wt: np.ndarray
) -> float:
    with np.errstate(over="ignore"):
        mass = np.exp(logsumexp(x[:, None] + y[None, :] - scaled_cost))
    return float(mass - w @ x - wt @ y)


def _newton_step(
    f: np.ndarray, g: np.ndarray, cost: np.ndarray, epsilon: float, w: np.ndarray, wt: np.ndarray
) -> tuple[np.ndarray, np.ndarray] | None:
    """One damped Newton step on the dual; None when no trial step improves it."""
    n = f.size
    scaled_cost = cost / epsilon
    x, y = f / epsilon, g / epsilon
    coupling = _gibbs(f, g, cost, epsilon)
    rows, cols = coupling.sum(axis=1), coupling.sum(axis=0)
    grad = np.concatenate([rows - w, cols - wt])
    # (1, -1) spans the kernel; lstsq returns the step orthogonal to it
    hessian = np.block([[np.diag(rows), coupling], [coupling.T, np.diag(cols)]])
    try:
        step = np.linalg.lstsq(hessian, -grad, rcond=None)[0]
    except np.linalg.LinAlgError:
        return None
    slope = float(grad @ step)
    if not slope < 0.0:
        return None
    current = _dual_objective(x, y, scaled_cost, w, wt)
    violation = marginal_violation(coupling, w, wt)
    t = 1.0
    for _ in range(LINE_SEARCH_HALVINGS):
        x_new, y_new = x + t * step[:n], y + t * step[n:]
        f_new, g_new = epsilon * x_new, epsilon * y_new
        trial = _dual_objective(x_new, y_new, scaled_cost, w, wt)
        if trial <= current + 1e-4 * t * slope or marginal_violation(
            _gibbs(f_new, g_new, cost, epsilon), w, wt
        ) < violation:
            return f_new, g_new
        t *= 0.5
    return None


def _sinkhorn_log(
    cost: np.ndarray, cfg: SinkhornConfig, w: np.ndarray, wt: np.ndarray
) -> tuple[np.ndarray, int, bool]:
    """Log-domain scaling with epsilon annealing and a dual Newton polish.

    Duals are carried in cost units so each stage warm-starts the next. The
    first sweep starts from g = 0 (an all-ones column scaling). Every sweep or
    Newton step counts against max_iterations and convergence is judged on
    the coupling at the target epsilon.
    """
    log_w, log_wt = np.log(w), np.log(wt)
    schedule = _epsilon_schedule(cfg.epsilon, cost)
    last = len(schedule) - 1
    stage, stage_sweeps = 0, 0
    f, g = np.zeros(cost.shape[0]), np.zeros(cost.shape[1])
    coupling = _gibbs(f, g, cost, cfg.epsilon)
    for iteration in range(1, cfg.max_iterations + 1):
        epsilon = schedule[stage]
        polished = None
        if stage == last and stage_sweeps >= NEWTON_AFTER_SWEEPS:
            polished = _newton_step(f, g, cost, epsilon, w, wt)
        if polished is None:
            f, g = _sweep(g, cost, epsilon, log_w, log_wt)
            stage_sweeps += 1
        else:
            f, g = polished
        coupling = _gibbs(f, g, cost, cfg.epsilon)
        if marginal_violation(coupling, w, wt) <= cfg.tolerance:
            return coupling, iteration, True
        if stage < last and (
            stage_sweeps >= STAGE_SWEEPS
            or marginal_violation(_gibbs(f, g, cost, epsilon), w, wt) <= STAGE_TOLERANCE
        ):
            stage, stage_sweeps = stage + 1, 0
    return coupling, cfg.max_iterations, False


def _sinkhorn_direct(
    cost: np.ndarray, cfg: SinkhornConfig, w: np.ndarray, wt: np.ndarray
) -> tuple[np.ndarray, int, bool]:
    kernel = np.exp(-cost / cfg.epsilon)
    c = np.ones(cost.shape[1])
    coupling = np.zeros_like(cost)
    with np.errstate(divide="ignore", invalid="ignore"):
        for iteration in range(1, cfg.max_iterations + 1):
            r = w / (kernel @ c)
            c = wt / (kernel.T @ r)
            if not (np.all(np.isfinite(r)) and np.all(np.isfinite(c))):
                raise NumericalError(
                    f"direct-domain scaling overflowed at iteration {iteration} "
                    f"(epsilon={cfg.epsilon}); use the log-domain solver"
                )
            coupling = r[:, None] * kernel * c[None, :]
            if marginal_violation(coupling, w, wt) <= cfg.tolerance:
                return coupling, iteration, True
    return coupling, cfg.max_iterations, False


def sinkhorn(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    cost: CostMatrix,
    cfg: SinkhornConfig | None = None,
) -> TransportPlan:
    """Alternate row and column scalings of exp(-D/epsilon) until both marginals hold.

    Rows are scaled first. Zero-weight points get zero rows or columns and
    take no part in the solve. The direct domain runs plain scaling at the
    target epsilon only.
    """
    cfg = cfg or SinkhornConfig()
    _check_shapes(a, b, cost)
    rows, cols = a.weights > 0.0, b.weights > 0.0
    solve = _sinkhorn_log if cfg.log_domain else _sinkhorn_direct
    support, iterations, converged = solve(
        cost.entries[np.ix_(rows, cols)], cfg, a.weights[rows], b.weights[cols]
    )
    if not np.all(np.isfinite(support)):
        raise NumericalError(f"sinkhorn produced non-finite coupling (epsilon={cfg.epsilon})")
    coupling = np.zeros(cost.shape)
    coupling[np.ix_(rows, cols)] = support
    metrics.inc("sinkhorn_solves_total")
    if not converged:
        metrics.inc("sinkhorn_nonconverged_total")
        logger.warning(
            "sinkhorn did not converge iterations=%s epsilon=%s violation=%s",
            iterations,
            cfg.epsilon,
            marginal_violation(coupling, a.weights, b.weights),
        )
    coupling.flags.writeable = False
    return TransportPlan(
        coupling=coupling,
        row_marginal=a.weights,
        col_marginal=b.weights,
        iterations_used=iterations,
        converged=converged,
    )


def _check_plan_cost(plan: TransportPlan, cost: CostMatrix) -> None:
    if plan.shape != cost.shape:
        raise ValueError(f"plan shape {plan.shape} does not match cost shape {cost.shape}")


def transport_cost(plan: TransportPlan, cost: CostMatrix) -> float:
    _check_plan_cost(plan, cost)
    return float(np.sum(cost.entries * plan.coupling))


def regularized_objective(plan: TransportPlan, cost: CostMatrix, epsilon: float) -> float:
    _check_plan_cost(plan, cost)
    coupling = plan.coupling
    entropy_term = float(np.sum(xlogy(coupling, coupling) - coupling))
    return transport_cost(plan, cost) + epsilon * entropy_term


def envelope_gradient(
    plan: TransportPlan,
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    cost: CostMatrix,
) -> tuple[np.ndarray, np.ndarray]:
    """Support gradients of the transport value with the coupling held fixed."""
    _check_plan_cost(plan, cost)
    d_left = cost_gradient(a.supports, b.supports, cost.p, cost.scale)
    grad_a = np.einsum("ij,ijl->il", plan.coupling, d_left)
    grad_b = -np.einsum("ij,ijl->jl", plan.coupling, d_left)
    return grad_a, grad_b


def exact_ot(
    a: DiscreteDistribution, b: DiscreteDistribution, cost: CostMatrix
) -> tuple[TransportPlan, float]:
    _check_shapes(a, b, cost)
    n, m = cost.shape
    max_cells = get_settings().oracle_max_cells
    if n * m > max_cells:
        raise ValueError(f"exact_ot is limited to {max_cells} cells, got {n}x{m}")
    rows = np.kron(np.eye(n), np.ones((1, m)))
    cols = np.kron(np.ones((1, n)), np.eye(m))
    result = linprog(
        c=cost.entries.reshape(-1),
        A_eq=np.vstack([rows, cols]),
        b_eq=np.concatenate([a.weights, b.weights]),
        bounds=(0.0, None),
        method="highs-ds",
    )
    if result.status != 0:
        raise NumericalError(f"transportation LP failed: {result.message}")
    coupling = np.clip(result.x.reshape(n, m), 0.0, None)
    coupling.flags.writeable = False
    metrics.inc("exact_ot_solves_total")
    plan = TransportPlan(
        coupling=coupling,
        row_marginal=a.weights,
        col_marginal=b.weights,
        iterations_used=int(result.nit),
        converged=True,
    )
    return plan, transport_cost(plan, cost)


def entropic_cost(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    p: float,
    scale: float,
    cfg: SinkhornConfig | None = None,
) -> tuple[float, TransportPlan]:
    cost = pairwise_cost(a, b, p, scale)
    plan = sinkhorn(a, b, cost, cfg)
    return transport_cost(plan, cost), plan


def sinkhorn_divergence(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    p: float = 2.0,
    scale: float = 0.5,
    cfg: SinkhornConfig | None = None,
) -> float:
    cross, _ = entropic_cost(a, b, p, scale, cfg)
    self_a, _ = entropic_cost(a, a, p, scale, cfg)
    self_b, _ = entropic_cost(b, b, p, scale, cfg)
    return cross - (self_a + self_b) / 2.0
