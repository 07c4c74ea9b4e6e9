"""Frank-Wolfe minimization of the relaxed cost over open-loop measure-valued controls.

Each iteration solves the state and adjoint systems under the current iterate,
takes the per-step Dirac at the minimizer of the path-averaged Hamiltonian as
the vertex direction, and backtracks along ``mu + theta (q - mu)`` with an
Armijo test on common random numbers.  A new noise seed is used every
iteration.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adjoint import solve_adjoint
from .bsde import CostEstimate, RegressionBasis, cost, solve_paths
from .hamiltonian import MpReport, mp_residual
from .noise import NoiseEnsemble, generate_noise
from .problem import FbsdeProblem, RelaxedControl, TimeGrid
from .report import fmt

Array = np.ndarray

ARMIJO = 1e-4
BACKTRACK = tuple(2.0 ** -j for j in range(11))


@dataclass
class OptimizerConfig:
    paths: int = 10_000
    seed: int = 0
    max_iters: int = 50
    tolerance: float = 1e-4
    basis: RegressionBasis = RegressionBasis()
    workers: int = 1


@dataclass
class HistoryRow:
    iter: int
    cost: float
    stderr: float
    fw_gap: float
    theta: float
    mp_residual: float
    # cost of the accepted iterate on this iteration's noise (NaN when no step was taken)
    step_cost: float = float("nan")


@dataclass(eq=False)
class OptimizerState:
    mu: RelaxedControl
    history: list = field(default_factory=list)
    thetas: list = field(default_factory=list)
    converged: bool = False
    stalled: bool = False

    @property
    def costs(self) -> Array:
        return np.array([h.cost for h in self.history])

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("iter", "cost", "stderr", "fw_gap", "theta", "mp_residual"))
        for h in self.history:
            w.writerow([h.iter] + [fmt(v) for v in (h.cost, h.stderr, h.fw_gap, h.theta, h.mp_residual)])
        return buf.getvalue()


def fw_direction(report: MpReport, mu: RelaxedControl) -> RelaxedControl:
    """Per-step Dirac at the minimizer of the path-averaged Hamiltonian."""
    w = np.zeros_like(mu.weights)
    w[np.arange(w.shape[0]), report.argmin] = 1.0
    return RelaxedControl(w, mu.grid)


@dataclass
class StepResult:
    mu: RelaxedControl
    theta: float
    accepted: bool
    cost: Optional[CostEstimate]


def fw_step(
    problem: FbsdeProblem,
    mu: RelaxedControl,
    q: RelaxedControl,
    base: CostEstimate,
    gap: float,
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
) -> StepResult:
    """Backtrack over ``1, 1/2, ..., 2^-10``; accept the first sufficient decrease.

    The Monte Carlo allowance is the standard error of the paired cost
    difference on the shared noise.
    """
    if np.array_equal(q.weights, mu.weights) or gap <= 0.0:
        return StepResult(mu, 0.0, False, None)
    for th in BACKTRACK:
        cand = mu.perturb(q, th)
        c = cost(problem, cand, solve_paths(problem, cand, noise, basis))
        diff = c.per_path - base.per_path
        slack = float(diff.std(ddof=1) / np.sqrt(diff.size))
        if c.value <= base.value - ARMIJO * th * abs(gap) + slack:
            return StepResult(cand, th, True, c)
    return StepResult(mu, 0.0, False, None)


def _evaluate(problem, mu, noise, basis):
    sol = solve_paths(problem, mu, noise, basis)
    c = cost(problem, mu, sol)
    adj = solve_adjoint(problem, mu, sol, noise, basis)
    return sol, c, mp_residual(problem, mu, sol, adj)


def optimize(
    problem: FbsdeProblem,
    mu0: RelaxedControl,
    grid: TimeGrid,
    config: OptimizerConfig = OptimizerConfig(),
    callback: Optional[Callable[[HistoryRow], None]] = None,
) -> tuple[RelaxedControl, MpReport, OptimizerState]:
    """Run the loop until the Frank-Wolfe gap drops to ``config.tolerance`` or the budget is spent.

    Returns the final iterate, its MP report and the state with the history.
    A stall (no step accepted) ends the loop early with ``state.stalled`` set.
    """
    state = OptimizerState(mu0)
    mu = mu0
    report = None
    for it in range(config.max_iters + 1):
        noise = generate_noise(grid, config.paths, problem.dims.d, config.seed + it,
                               initial_dim=problem.initial_dim, workers=config.workers)
        _, c, report = _evaluate(problem, mu, noise, config.basis)
        row = HistoryRow(it, c.value, c.stderr, report.fw_gap, 0.0, report.global_residual)
        if report.fw_gap <= config.tolerance:
            state.converged = True
        if state.converged or it == config.max_iters:
            state.history.append(row)
            if callback:
                callback(row)
            break
        step = fw_step(problem, mu, fw_direction(report, mu), c, report.fw_gap, noise, config.basis)
        row.theta = step.theta
        if step.accepted:
            row.step_cost = step.cost.value
        state.history.append(row)
        state.thetas.append(step.theta)
        if callback:
            callback(row)
        if not step.accepted:
            state.stalled = True
            break
        mu = step.mu
    state.mu = mu
    return mu, report, state

