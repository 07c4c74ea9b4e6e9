"""Adjoint processes ``(k, p, P)``.

The system is triangular once the Hamiltonian is written out: the drift and
loading of ``k`` involve only ``k``, so ``k`` is stepped forward from
``h_y(y_0)`` first, and ``(p, P)`` then solve a linear backward equation whose
coefficients are known along every path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import RegressionBasis, solve_linear_bsde
from .mixing import Control, mix
from .noise import NoiseEnsemble
from .problem import FbsdeProblem
from .sde import NumericalAbort, PathEnsemble

Array = np.ndarray


@dataclass(eq=False)
class AdjointProcesses:
    """``k [M, N+1, m]``, ``p [M, N+1, n]``, ``P [M, N, n, d]``."""

    k: Array
    p: Array
    P: Array
    diagnostics: list = field(default_factory=list)


def forward_k(problem: FbsdeProblem, control: Control, sol: PathEnsemble, noise: NoiseEnsemble) -> Array:
    grid = noise.grid
    t, dt = grid.nodes, grid.dt
    M, N = sol.paths, grid.steps
    m = problem.dims.m
    k = np.empty((M, N + 1, m))
    k[:, 0] = problem.h_y(sol.y[:, 0])
    for i in range(N):
        args = (t[i], sol.x[:, i], sol.y[:, i], sol.z[:, i])
        ki = k[:, i]
        drift = mix(control, i, problem.l_y, *args) + np.einsum("mj,mjk->mk", ki, mix(control, i, problem.f_y, *args))
        load = mix(control, i, problem.l_z, *args) + np.einsum("mj,mjke->mke", ki, mix(control, i, problem.f_z, *args))
        k[:, i + 1] = ki + drift * dt + np.einsum("mke,me->mk", load, noise.dw[:, i])
        if not np.all(np.isfinite(k[:, i + 1])):
            raise NumericalAbort("adjoint k", i + 1)
    return k


def solve_adjoint(
    problem: FbsdeProblem,
    control: Control,
    sol: PathEnsemble,
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
    features: Optional[Array] = None,
) -> AdjointProcesses:
    """Adjoints along a solved ensemble.

    ``p`` is regressed on ``(x, k)`` by default: ``p`` generally depends on
    ``k`` whenever the generator has a ``z``-loading.
    """
    if sol.y is None or sol.z is None:
        raise ValueError("adjoint needs the solved backward component")
    k = forward_k(problem, control, sol, noise)
    t = noise.grid.nodes
    x, y, z = sol.x, sol.y, sol.z

    def coefficients(i):
        args = (t[i], x[:, i], y[:, i], z[:, i])
        A = np.swapaxes(mix(control, i, problem.b_x, t[i], x[:, i]), 1, 2)
        B = np.transpose(mix(control, i, problem.sigma_x, t[i], x[:, i]), (0, 3, 1, 2))
        c = mix(control, i, problem.l_x, *args) + np.einsum("mj,mjk->mk", k[:, i], mix(control, i, problem.f_x, *args))
        return A, B, c

    xN = x[:, -1]
    terminal = problem.g_x(xN) + np.einsum("mj,mjk->mk", k[:, -1], problem.phi_x(xN))
    feats = np.concatenate([x, k], axis=2) if features is None else features
    bs = solve_linear_bsde(coefficients, terminal, feats, noise, basis)
    return AdjointProcesses(k, bs.y, bs.z, bs.diagnostics)
