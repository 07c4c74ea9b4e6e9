"""Hamiltonian evaluation, pointwise minimization and optimality certificates.

``H(t, x, y, z, a, k, p, P) = l + p.b + P:sigma + k.f`` is evaluated per path;
the relaxed Hamiltonian is its integral against a measure on the action grid
and is therefore linear in the measure, so minimizing it over measures reduces
to a scan over the grid points.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import AdjointProcesses
from .mixing import Control
from .problem import ActionGrid, FbsdeProblem, RelaxedControl, StrictControl, dirac_embed
from .report import fmt
from .sde import PathEnsemble

Array = np.ndarray


@dataclass(eq=False)
class HamiltonianContext:
    """State and adjoint values at one time: x [M,n], y [M,m], z [M,m,d], k [M,m], p [M,n], P [M,n,d]."""

    t: float
    x: Array
    y: Array
    z: Array
    k: Array
    p: Array
    P: Array

    @classmethod
    def at_step(cls, sol: PathEnsemble, adj: AdjointProcesses, i: int) -> "HamiltonianContext":
        return cls(float(sol.grid.nodes[i]), sol.x[:, i], sol.y[:, i], sol.z[:, i], adj.k[:, i], adj.p[:, i], adj.P[:, i])

    def with_state(self, x: Array, y: Array, z: Array) -> "HamiltonianContext":
        return HamiltonianContext(self.t, x, y, z, self.k, self.p, self.P)


def eval_hamiltonian(problem: FbsdeProblem, ctx: HamiltonianContext, action) -> Array:
    """Per-path strict Hamiltonian at one action, shape [M]."""
    a = np.asarray(action, dtype=float)
    t, x, y, z = ctx.t, ctx.x, ctx.y, ctx.z
    out = np.asarray(problem.l(t, x, y, z, a), dtype=float)
    out = out + np.sum(ctx.p * problem.b(t, x, a), axis=1)
    out = out + np.sum(ctx.P * problem.sigma(t, x, a), axis=(1, 2))
    out = out + np.sum(ctx.k * problem.f(t, x, y, z, a), axis=1)
    return out


def hamiltonian_table(problem: FbsdeProblem, ctx: HamiltonianContext, grid: ActionGrid) -> Array:
    """Per-path Hamiltonian at every grid action, shape [M, K]."""
    return np.stack([eval_hamiltonian(problem, ctx, grid.points[j]) for j in range(grid.size)], axis=1)


def _weigh(table: Array, weights: Array) -> Array:
    # same summation order as the control mixer: unit weights pass through untouched
    acc = None
    for j in np.flatnonzero(weights):
        w = weights[j]
        term = table[:, j] if w == 1.0 else w * table[:, j]
        acc = term if acc is None else acc + term
    return acc


def eval_relaxed_hamiltonian(problem: FbsdeProblem, ctx: HamiltonianContext, weights, grid: ActionGrid) -> Array:
    """Per-path relaxed Hamiltonian for one probability vector over the grid."""
    weights = np.asarray(weights, dtype=float)
    acc = None
    for j in np.flatnonzero(weights):
        val = eval_hamiltonian(problem, ctx, grid.points[j])
        w = weights[j]
        term = val if w == 1.0 else w * val
        acc = term if acc is None else acc + term
    return acc


def minimize_hamiltonian(problem: FbsdeProblem, ctx: HamiltonianContext, grid: ActionGrid) -> tuple[int, float]:
    """Grid index minimizing the path-averaged Hamiltonian, ties going to the lowest index."""
    means = hamiltonian_table(problem, ctx, grid).mean(axis=0)
    j = int(np.argmin(means))
    return j, float(means[j])


@dataclass
class MpReport:
    t: Array
    gap: Array
    stderr: Array
    argmin: Array
    fw_gap: float
    fw_stderr: float

    @property
    def steps(self) -> int:
        return self.gap.size

    @property
    def global_residual(self) -> float:
        return float(self.gap.max())

    @property
    def worst_step(self) -> int:
        return int(np.argmax(self.gap))

    @property
    def global_stderr(self) -> float:
        return float(self.stderr[self.worst_step])

    def satisfies(self, eps: float) -> bool:
        return self.global_residual <= eps

    def rows(self):
        for i in range(self.steps):
            yield i, float(self.t[i]), float(self.gap[i]), float(self.stderr[i]), int(self.argmin[i])

    COLUMNS = ("step", "t", "gap", "stderr", "argmin_index")


def mp_residual(problem: FbsdeProblem, control: Control, sol: PathEnsemble, adj: AdjointProcesses) -> MpReport:
    """Per-step open-loop gap ``E[Hbar(mu_t) - H(a*_t)]`` with ``a*_t`` minimizing ``E[H]``.

    The gap is nonnegative by construction of ``a*_t`` up to the sign of the
    sample mean, and ``fw_gap`` is its time integral.
    """
    weights = control.weights if isinstance(control, RelaxedControl) else dirac_embed(control).weights
    grid = control.grid
    N = weights.shape[0]
    M = sol.paths
    dt = sol.grid.dt
    gap = np.empty(N)
    se = np.empty(N)
    idx = np.empty(N, dtype=int)
    total = np.zeros(M)
    for i in range(N):
        table = hamiltonian_table(problem, HamiltonianContext.at_step(sol, adj, i), grid)
        j = int(np.argmin(table.mean(axis=0)))
        diff = _weigh(table, weights[i]) - table[:, j]
        gap[i] = diff.mean()
        se[i] = diff.std(ddof=1) / np.sqrt(M) if M > 1 else np.inf
        idx[i] = j
        total += diff * dt
    fw_se = float(total.std(ddof=1) / np.sqrt(M)) if M > 1 else float("inf")
    return MpReport(sol.grid.nodes[:N].copy(), gap, se, idx, float(total.mean()), fw_se)


def mp_csv(report: MpReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MpReport.COLUMNS)
    for step, t, g, s, j in report.rows():
        w.writerow([step, fmt(t), fmt(g), fmt(s), j])
    return buf.getvalue()


# ---------------------------------------------------------------- sufficiency

@dataclass
class ConvexityViolation:
    function: str
    left: Array
    right: Array
    excess: float


@dataclass
class SufficiencyReport:
    convex_g: bool
    convex_h: bool
    convex_H: bool
    mp: MpReport
    mp_ok: bool
    tolerance: float
    fixed_terminal: bool
    violations: list = field(default_factory=list)

    @property
    def convex(self) -> bool:
        return self.convex_g and self.convex_h and self.convex_H

    @property
    def holds(self) -> bool:
        return self.convex and self.mp_ok

    def summary(self) -> str:
        verdict = "holds" if self.holds else "does not hold"
        lines = [f"sufficient-conditions certificate {verdict}",
                 f"  convexity g={self.convex_g} h={self.convex_h} H={self.convex_H}",
                 f"  mp residual {self.mp.global_residual:.6g} (tolerance {self.tolerance:.6g})",
                 f"  fixed-terminal hypothesis flagged: {self.fixed_terminal}"]
        for v in self.violations[:5]:
            lines.append(f"  violation in {v.function}: excess {v.excess:.3g}")
        return "\n".join(lines)


def _segments(points: Array, rng: np.random.Generator, count: int):
    """Random pairs from ``points`` plus pairs symmetric about the origin."""
    M = points.shape[0]
    half = count // 2
    i = rng.integers(0, M, size=count)
    j = rng.integers(0, M, size=count)
    left = points[i].copy()
    right = points[j].copy()
    right[:half] = -left[:half]
    return left, right


def _midpoint_excess(fun, left: Array, right: Array) -> Array:
    mid = fun(0.5 * (left + right))
    ends = 0.5 * (fun(left) + fun(right))
    scale = 1.0 + np.abs(ends)
    return (mid - ends) / scale


def check_sufficiency(
    problem: FbsdeProblem,
    control: RelaxedControl,
    sol: PathEnsemble,
    adj: AdjointProcesses,
    eps: float,
    probes: int = 256,
    tol: float = 1e-9,
    seed: int = 0,
) -> SufficiencyReport:
    """Midpoint convexity probes of g, h and (x, y, z) -> Hbar, plus the MP residual at ``eps``.

    The probe points are drawn from the simulated ensemble; half of the
    segments are symmetric about the origin.  Convexity of the action set is
    not probed.
    """
    rng = np.random.default_rng(seed)
    violations = []

    def probe(name, fun, left, right):
        excess = _midpoint_excess(fun, left, right)
        bad = np.flatnonzero(excess > tol)
        for b in bad[:10]:
            violations.append(ConvexityViolation(name, left[b], right[b], float(excess[b])))
        return bad.size == 0

    xl, xr = _segments(sol.x[:, -1], rng, probes)
    ok_g = probe("g", problem.g, xl, xr)
    yl, yr = _segments(sol.y[:, 0], rng, probes)
    ok_h = probe("h", problem.h, yl, yr)

    ok_H = True
    n, m = problem.dims.n, problem.dims.m
    steps = rng.choice(control.steps, size=min(8, control.steps), replace=False)
    for i in np.sort(steps):
        ctx = HamiltonianContext.at_step(sol, adj, int(i))
        M = sol.paths
        state = np.concatenate([ctx.x, ctx.y, ctx.z.reshape(M, -1)], axis=1)
        sl, sr = _segments(state, rng, probes)
        rows = rng.integers(0, M, size=probes)
        base = HamiltonianContext(ctx.t, ctx.x[rows], ctx.y[rows], ctx.z[rows], ctx.k[rows], ctx.p[rows], ctx.P[rows])

        def Hbar(s, base=base, i=i):
            c = base.with_state(s[:, :n], s[:, n:n + m], s[:, n + m:].reshape(base.z.shape))
            return eval_relaxed_hamiltonian(problem, c, control.weights[i], control.grid)

        ok_H = probe(f"H[step {int(i)}]", Hbar, sl, sr) and ok_H

    mp = mp_residual(problem, control, sol, adj)
    return SufficiencyReport(ok_g, ok_h, ok_H, mp, mp.satisfies(eps), eps, problem.fixed_terminal, violations)
