"""First-order sensitivity of the controlled system to a convex perturbation.

For ``mu^theta = mu + theta (q - mu)`` the derivative at ``theta = 0`` solves

    dxt = (b_x xt + bbar(q) - bbar(mu)) dt + (sigma_x xt + sigmabar(q) - sigmabar(mu)) dW,   xt_0 = 0
    dyt = -(f_x xt + f_y yt + f_z zt + fbar(q) - fbar(mu)) dt + zt dW,   yt_T = phi_x(x_T) xt_T

with every derivative evaluated along the unperturbed solution.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .adjoint import AdjointProcesses
from .bsde import CostEstimate, RegressionBasis, backward_sweep, cost, solve_backward, solve_linear_bsde
from .hamiltonian import HamiltonianContext, hamiltonian_table, _weigh
from .mixing import mix
from .noise import NoiseEnsemble
from .problem import FbsdeProblem, RelaxedControl
from .report import fmt
from .sde import NumericalAbort, PathEnsemble, simulate_forward

Array = np.ndarray


@dataclass(eq=False)
class VariationalPaths:
    """``xt [M, N+1, n]``, ``yt [M, N+1, m]``, ``zt [M, N, m, d]`` for the direction ``(mu, q)``."""

    xt: Array
    yt: Array
    zt: Array
    mu: RelaxedControl
    q: RelaxedControl
    diagnostics: list


def _source(mu, q, i, fn, *args):
    return mix(q, i, fn, *args) - mix(mu, i, fn, *args)


def variational_forward(problem: FbsdeProblem, mu: RelaxedControl, q: RelaxedControl, sol: PathEnsemble,
                        noise: NoiseEnsemble) -> Array:
    grid = noise.grid
    t, dt = grid.nodes, grid.dt
    M, N, n = sol.paths, grid.steps, problem.dims.n
    xt = np.zeros((M, N + 1, n))
    for i in range(N):
        xi, v = sol.x[:, i], xt[:, i]
        drift = np.einsum("mjk,mk->mj", mix(mu, i, problem.b_x, t[i], xi), v) + _source(mu, q, i, problem.b, t[i], xi)
        vol = np.einsum("mjek,mk->mje", mix(mu, i, problem.sigma_x, t[i], xi), v) + _source(mu, q, i, problem.sigma, t[i], xi)
        xt[:, i + 1] = v + drift * dt + np.einsum("mje,me->mj", vol, noise.dw[:, i])
        if not np.all(np.isfinite(xt[:, i + 1])):
            raise NumericalAbort("variational state", i + 1)
    return xt


def solve_variational(
    problem: FbsdeProblem,
    mu: RelaxedControl,
    q: RelaxedControl,
    sol: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
    features: Optional[Array] = None,
) -> VariationalPaths:
    """Variational triple along ``sol`` (solved under ``mu`` on ``noise``).

    The backward part is regressed on ``(x, xt)`` unless ``features`` is given.
    """
    xt = variational_forward(problem, mu, q, sol, noise)
    t = noise.grid.nodes
    x, y, z = sol.x, sol.y, sol.z

    def coefficients(i):
        args = (t[i], x[:, i], y[:, i], z[:, i])
        A = mix(mu, i, problem.f_y, *args)
        B = mix(mu, i, problem.f_z, *args)
        c = np.einsum("mjk,mk->mj", mix(mu, i, problem.f_x, *args), xt[:, i]) + _source(mu, q, i, problem.f, *args)
        return A, B, c

    terminal = np.einsum("mjk,mk->mj", problem.phi_x(x[:, -1]), xt[:, -1])
    feats = np.concatenate([x, xt], axis=2) if features is None else features
    bs = solve_linear_bsde(coefficients, terminal, feats, noise, basis)
    return VariationalPaths(xt, bs.y, bs.z, mu, q, bs.diagnostics)


def variational_inequality_value(problem: FbsdeProblem, sol: PathEnsemble, varp: VariationalPaths) -> CostEstimate:
    """``E[g_x xt_T] + E[h_y yt_0] + E int (lbar(q) - lbar(mu)) + lbar_x xt + lbar_y yt + lbar_z : zt dt``."""
    mu, q = varp.mu, varp.q
    grid = sol.grid
    t, dt = grid.nodes, grid.dt
    x, y, z = sol.x, sol.y, sol.z
    total = np.sum(problem.g_x(x[:, -1]) * varp.xt[:, -1], axis=1) + np.sum(problem.h_y(y[:, 0]) * varp.yt[:, 0], axis=1)
    for i in range(grid.steps):
        args = (t[i], x[:, i], y[:, i], z[:, i])
        run = _source(mu, q, i, problem.l, *args)
        run = run + np.sum(mix(mu, i, problem.l_x, *args) * varp.xt[:, i], axis=1)
        run = run + np.sum(mix(mu, i, problem.l_y, *args) * varp.yt[:, i], axis=1)
        run = run + np.sum(mix(mu, i, problem.l_z, *args) * varp.zt[:, i], axis=(1, 2))
        total = total + run * dt
    return _estimate(total)


def hamiltonian_difference(problem: FbsdeProblem, mu: RelaxedControl, q: RelaxedControl, sol: PathEnsemble,
                           adj: AdjointProcesses) -> CostEstimate:
    """``E int (Hbar(q) - Hbar(mu)) dt`` along the adjoints of ``mu``."""
    dt = sol.grid.dt
    total = np.zeros(sol.paths)
    for i in range(mu.steps):
        table = hamiltonian_table(problem, HamiltonianContext.at_step(sol, adj, i), mu.grid)
        total = total + (_weigh(table, q.weights[i]) - _weigh(table, mu.weights[i])) * dt
    return _estimate(total)


def _estimate(per_path: Array) -> CostEstimate:
    M = per_path.shape[0]
    se = float(per_path.std(ddof=1) / np.sqrt(M)) if M > 1 else float("inf")
    return CostEstimate(float(per_path.mean()), se, per_path)


# ------------------------------------------------------------ convergence

@dataclass
class ConvergenceTable:
    theta: Array
    dx2: Array
    dy2: Array
    dz2: Array
    gx2: Array
    gy2: Array
    gz2: Array
    scale: float

    COLUMNS = ("theta", "dx2", "dy2", "dz2", "gx2", "gy2", "gz2")

    def column(self, name: str) -> Array:
        return getattr(self, name)

    def rows(self):
        for j in range(self.theta.size):
            yield tuple(float(self.column(c)[j]) for c in self.COLUMNS)

    def monotone(self, name: str, allowed: int = 1, floor: Optional[float] = None) -> bool:
        """Nonincreasing along the (decreasing) theta schedule with at most ``allowed`` violations.

        Entries below ``floor`` count as zero; the default floor sits at the
        level of double-precision cancellation relative to ``scale``.
        """
        floor = 1e-20 * max(self.scale, 1.0) if floor is None else floor
        vals = np.where(self.column(name) < floor, 0.0, self.column(name))
        return int(np.sum(vals[1:] > vals[:-1])) <= allowed

    def slope(self, name: str = "dx2") -> float:
        """Least-squares slope of log(column) against log(theta)."""
        return float(np.polyfit(np.log(self.theta), np.log(self.column(name)), 1)[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows():
            w.writerow([fmt(v) for v in row])
        return buf.getvalue()


def convergence_probe(
    problem: FbsdeProblem,
    mu: RelaxedControl,
    q: RelaxedControl,
    thetas: Sequence[float],
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
) -> ConvergenceTable:
    """Trajectory gaps of ``mu^theta`` against ``mu`` and against the first-order prediction.

    Every backward solve (``y^mu``, each ``y^theta`` and ``yt``) is projected on
    the same features ``(x^mu, xt)`` and the same noise, so the comparison
    isolates the dependence on ``theta``.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size == 0 or np.any(thetas <= 0) or np.any(thetas > 1) or np.any(np.diff(thetas) >= 0):
        raise ValueError("theta schedule must be strictly decreasing in (0, 1]")
    dt = noise.grid.dt
    x_mu = simulate_forward(problem, mu, noise)
    xt = variational_forward(problem, mu, q, PathEnsemble(x_mu, None, None, noise.grid), noise)
    feats = np.concatenate([x_mu, xt], axis=2)
    base = solve_backward(problem, mu, x_mu, noise, basis, features=feats)
    sol = PathEnsemble(x_mu, base.y, base.z, noise.grid)
    var = solve_variational(problem, mu, q, sol, noise, basis, features=feats)

    def sq(a):
        return np.sum(a.reshape(a.shape[0], a.shape[1], -1) ** 2, axis=2)

    out = {c: [] for c in ConvergenceTable.COLUMNS[1:]}
    for th in thetas:
        ctl = mu.perturb(q, th)
        x_th = simulate_forward(problem, ctl, noise)
        bs = solve_backward(problem, ctl, x_th, noise, basis, features=feats)
        dx, dy, dz = x_th - x_mu, bs.y - base.y, bs.z - base.z
        out["dx2"].append(sq(dx).mean(axis=0).max())
        out["dy2"].append(sq(dy).mean(axis=0).max())
        out["dz2"].append(sq(dz).mean(axis=0).sum() * dt)
        out["gx2"].append(sq(dx / th - var.xt).mean(axis=0).max())
        out["gy2"].append(sq(dy / th - var.yt).mean(axis=0).max())
        out["gz2"].append(sq(dz / th - var.zt).mean(axis=0).sum() * dt)
    scale = float(max(sq(var.xt).mean(axis=0).max(), sq(var.yt).mean(axis=0).max()))
    return ConvergenceTable(thetas, *(np.array(out[c]) for c in ConvergenceTable.COLUMNS[1:]), scale=scale)


@dataclass
class DirectionalDerivative:
    thetas: Array
    quotients: Array     # (J(mu^theta) - J(mu)) / theta, per theta
    stderrs: Array
    intercept: float
    intercept_stderr: float


def directional_derivative(
    problem: FbsdeProblem,
    mu: RelaxedControl,
    q: RelaxedControl,
    thetas: Sequence[float],
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
    base: Optional[CostEstimate] = None,
) -> DirectionalDerivative:
    """Difference quotients on common random numbers and their linear extrapolation to theta = 0.

    The intercept is a fixed linear combination of the quotients, so its
    standard error follows from the per-path combination.
    """
    from .bsde import solve_paths

    thetas = np.asarray(thetas, dtype=float)
    if base is None:
        base = cost(problem, mu, solve_paths(problem, mu, noise, basis))
    per = []
    for th in thetas:
        ctl = mu.perturb(q, th)
        c = cost(problem, ctl, solve_paths(problem, ctl, noise, basis))
        per.append((c.per_path - base.per_path) / th)
    per = np.array(per)  # [T, M]
    design = np.stack([np.ones_like(thetas), thetas], axis=1)
    weights = np.linalg.pinv(design)[0]  # intercept = weights @ quotients
    icpt = weights @ per
    M = per.shape[1]
    return DirectionalDerivative(
        thetas, per.mean(axis=1), per.std(axis=1, ddof=1) / np.sqrt(M),
        float(icpt.mean()), float(icpt.std(ddof=1) / np.sqrt(M)),
    )
