"""Euler-Maruyama simulation of the forward state under strict or relaxed controls."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mixing import Control, mix
from .noise import NoiseEnsemble
from .problem import FbsdeProblem, TimeGrid

Array = np.ndarray


class NumericalAbort(FloatingPointError):
    """A simulated or regressed quantity became NaN/Inf."""

    def __init__(self, what: str, step: int, path: Optional[int] = None):
        self.what, self.step, self.path = what, step, path
        where = f"step {step}" + ("" if path is None else f", path {path}")
        super().__init__(f"non-finite {what} at {where}")


@dataclass(eq=False)
class PathEnsemble:
    """Trajectories ``x [M, N+1, n]``, ``y [M, N+1, m]``, ``z [M, N, m, d]``."""

    x: Array
    y: Optional[Array]
    z: Optional[Array]
    grid: TimeGrid
    diagnostics: list = field(default_factory=list)

    @property
    def paths(self) -> int:
        return self.x.shape[0]


def _check_finite(arr: Array, what: str, step: int) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)))
        raise NumericalAbort(what, step, int(bad[0][0]))


def simulate_forward(problem: FbsdeProblem, control: Control, noise: NoiseEnsemble) -> Array:
    """Euler recursion ``x_{i+1} = x_i + bbar dt + sigmabar dW_i``.

    ``bbar`` and ``sigmabar`` are the coefficient values integrated against the
    control's measure at ``t_i`` before the update.
    """
    grid = noise.grid
    if control.steps != grid.steps:
        raise ValueError(f"control has {control.steps} steps, noise grid has {grid.steps}")
    if noise.dim != problem.dims.d:
        raise ValueError("noise dimension does not match the Brownian dimension")
    if getattr(control, "per_path", False) and control.indices.shape[1] != noise.paths:
        raise ValueError("per-path strict control does not match the number of paths")
    M, N, dt = noise.paths, grid.steps, grid.dt
    t = grid.nodes
    x = np.empty((M, N + 1, problem.dims.n))
    x[:, 0] = problem.initial_state(M, noise.initial if noise.initial.size else None)
    _check_finite(x[:, 0], "initial state", 0)
    for i in range(N):
        xi = x[:, i]
        drift = mix(control, i, problem.b, t[i], xi)
        vol = mix(control, i, problem.sigma, t[i], xi)
        x[:, i + 1] = xi + drift * dt + np.einsum("mnd,md->mn", vol, noise.dw[:, i])
        _check_finite(x[:, i + 1], "forward state", i + 1)
    return x
