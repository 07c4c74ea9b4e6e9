"""Backward component by least-squares Monte Carlo regression.

The explicit one-pass scheme is used everywhere:

    y_N = terminal
    z_i = Proj_i[ (y_{i+1} - Proj_i y_{i+1}) dW_i^T ] / dt
    y_i = Proj_i[ y_{i+1} + F(t_i, ..., y_{i+1}, z_i) dt ]

where ``Proj_i`` is the least-squares projection onto polynomials (total
degree <= p) of the step-i regression features, normally the forward state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb
from typing import Callable, Optional

import numpy as np

from .mixing import Control, mix
from .noise import NoiseEnsemble
from .problem import FbsdeProblem
from .sde import NumericalAbort, PathEnsemble, simulate_forward

Array = np.ndarray


@dataclass(frozen=True)
class RegressionBasis:
    degree: int = 2
    rcond: float = 1e-10

    def __post_init__(self):
        if int(self.degree) < 0:
            raise ValueError("basis degree must be >= 0")

    def size(self, n_features: int) -> int:
        return comb(n_features + self.degree, self.degree)

    def design(self, features: Array) -> Array:
        """Monomials of the standardized features; constant features are dropped."""
        feats = np.asarray(features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        M = feats.shape[0]
        mean = feats.mean(axis=0)
        scale = feats.std(axis=0)
        live = scale > 1e-12 * (1.0 + np.abs(mean))
        u = (feats[:, live] - mean[live]) / scale[live]
        cols = [np.ones(M)]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(u.shape[1]), deg):
                col = u[:, combo[0]].copy()
                for j in combo[1:]:
                    col *= u[:, j]
                cols.append(col)
        X = np.stack(cols, axis=1)
        if not np.all(np.isfinite(X)):
            raise NumericalAbort("regression basis", -1)
        return X


@dataclass
class StepDiagnostic:
    step: int
    rank: int
    size: int
    condition: float

    @property
    def rank_deficient(self) -> bool:
        return self.rank < self.size


class Projector:
    """Orthogonal projection onto the column space of a design matrix."""

    def __init__(self, X: Array, rcond: float, nominal_size: int, step: int):
        U, s, _ = np.linalg.svd(X, full_matrices=False)
        r = int(np.sum(s > rcond * s[0])) if s.size and s[0] > 0 else 0
        self.U = U[:, :r]
        cond = float(s[0] / s[r - 1]) if r else float("inf")
        self.diagnostic = StepDiagnostic(step, r, nominal_size, cond)

    def __call__(self, Y: Array) -> Array:
        flat = Y.reshape(Y.shape[0], -1)
        fit = self.U @ (self.U.T @ flat)
        return fit.reshape(Y.shape)


@dataclass(eq=False)
class BsdeSolution:
    y: Array
    z: Array
    diagnostics: list = field(default_factory=list)

    @property
    def flagged_steps(self) -> list:
        return [d.step for d in self.diagnostics if d.rank_deficient]


def backward_sweep(
    terminal: Array,
    driver: Callable[[int, Array, Array], Optional[Array]],
    features: Array,
    noise: NoiseEnsemble,
    basis: RegressionBasis,
) -> BsdeSolution:
    """Generic explicit backward recursion.

    ``driver(i, y_next, z_i)`` returns the generator at step ``i`` (or None for
    a zero generator); ``features`` has shape [M, N+1, F].
    """
    grid = noise.grid
    M, N, dt = noise.paths, grid.steps, grid.dt
    terminal = np.asarray(terminal, dtype=float)
    m = terminal.shape[1]
    d = noise.dim
    y = np.empty((M, N + 1, m))
    z = np.empty((M, N, m, d))
    y[:, N] = terminal
    diags = []
    nominal = basis.size(features.shape[2])
    for i in range(N - 1, -1, -1):
        proj = Projector(basis.design(features[:, i]), basis.rcond, nominal, i)
        diags.append(proj.diagnostic)
        y_next = y[:, i + 1]
        # the fitted conditional mean is a control variate: it has zero
        # conditional correlation with dW but removes most of the variance
        resid = y_next - proj(y_next)
        zi = proj(resid[:, :, None] * noise.dw[:, i, None, :]) / dt
        gen = driver(i, y_next, zi)
        target = y_next if gen is None else y_next + gen * dt
        yi = proj(target)
        if not (np.all(np.isfinite(zi)) and np.all(np.isfinite(yi))):
            raise NumericalAbort("regression output", i)
        z[:, i] = zi
        y[:, i] = yi
    diags.reverse()
    return BsdeSolution(y, z, diags)


def solve_backward(
    problem: FbsdeProblem,
    control: Control,
    x: Array,
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
    features: Optional[Array] = None,
) -> BsdeSolution:
    """(y, z) of the controlled backward equation with terminal ``phi(x_N)``."""
    t = noise.grid.nodes
    terminal = problem.phi(x[:, -1])

    def driver(i, y_next, zi):
        return mix(control, i, problem.f, t[i], x[:, i], y_next, zi)

    return backward_sweep(terminal, driver, x if features is None else features, noise, basis)


def solve_linear_bsde(
    coefficients: Callable[[int], tuple],
    terminal: Array,
    features: Array,
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
) -> BsdeSolution:
    """Solve ``dY = -(A Y + B:Z + c) dt + Z dW`` with ``Y_T = terminal``.

    ``coefficients(i)`` returns ``(A [M,m,m], B [M,m,m,d], c [M,m])`` at step
    ``i``; any entry may be None for a zero coefficient.
    """

    def driver(i, y_next, zi):
        A, B, c = coefficients(i)
        out = None
        if A is not None:
            out = np.einsum("mjk,mk->mj", A, y_next)
        if B is not None:
            bz = np.einsum("mjke,mke->mj", B, zi)
            out = bz if out is None else out + bz
        if c is not None:
            out = c if out is None else out + c
        return out

    return backward_sweep(terminal, driver, features, noise, basis)


def solve_paths(
    problem: FbsdeProblem,
    control: Control,
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
) -> PathEnsemble:
    """Simulate x, then regress (y, z); returns the full ensemble."""
    x = simulate_forward(problem, control, noise)
    sol = solve_backward(problem, control, x, noise, basis)
    return PathEnsemble(x, sol.y, sol.z, noise.grid, sol.diagnostics)


@dataclass
class CostEstimate:
    value: float
    stderr: float
    per_path: Array

    def __iter__(self):
        yield self.value
        yield self.stderr


def cost(problem: FbsdeProblem, control: Control, paths: PathEnsemble) -> CostEstimate:
    """Monte Carlo estimate of g(x_T) + h(y_0) + sum_i lbar(t_i, ...) dt."""
    if paths.y is None or paths.z is None:
        raise ValueError("cost needs a solved backward component")
    grid = paths.grid
    t, dt = grid.nodes, grid.dt
    total = np.asarray(problem.g(paths.x[:, -1]), dtype=float) + np.asarray(problem.h(paths.y[:, 0]), dtype=float)
    for i in range(grid.steps):
        run = mix(control, i, problem.l, t[i], paths.x[:, i], paths.y[:, i], paths.z[:, i])
        total = total + run * dt
    M = total.shape[0]
    se = float(np.std(total, ddof=1) / np.sqrt(M)) if M > 1 else float("inf")
    return CostEstimate(float(np.mean(total)), se, total)
