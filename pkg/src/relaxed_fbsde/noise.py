"""Per-path counter-based Brownian increments.

Path ``p`` owns the Philox counter blocks ``[p * B, (p + 1) * B)`` under the
key ``seed``, where ``B`` is the number of 4-word blocks needed to hold the
path's draws. Each raw 64-bit word becomes one uniform in (0, 1) and then one
standard normal through the inverse normal CDF, so a path's draws are a pure
function of ``(seed, path, position)``. Any partition of the paths across
workers therefore reproduces the same bits.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .problem import TimeGrid

Array = np.ndarray

_MASK64 = (1 << 64) - 1


def _path_normals(seed: int, start: int, stop: int, per_path: int) -> Array:
    blocks = -(-per_path // 4)
    bitgen = np.random.Philox(key=int(seed) & _MASK64, counter=[start * blocks, 0, 0, 0])
    raw = bitgen.random_raw((stop - start) * blocks * 4).reshape(stop - start, blocks * 4)
    raw = raw[:, :per_path]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
    return ndtri(u)


def path_normals(seed: int, paths: int, per_path: int, workers: int = 1, chunk: int | None = None) -> Array:
    """Standard normals ``[paths, per_path]`` from the per-path streams.

    The chunking only schedules work; it never changes the values.
    """
    if paths < 1:
        raise ValueError("need at least one path")
    if chunk is None:
        chunk = min(4096, max(64, -(-paths // (4 * max(workers, 1)))))
    bounds = [(s, min(s + chunk, paths)) for s in range(0, paths, chunk)]
    out = np.empty((paths, per_path))
    if workers <= 1 or len(bounds) == 1:
        for s, e in bounds:
            out[s:e] = _path_normals(seed, s, e, per_path)
        return out

    def fill(se):
        s, e = se
        out[s:e] = _path_normals(seed, s, e, per_path)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fill, bounds))
    return out


@dataclass(eq=False)
class NoiseEnsemble:
    """Brownian increments ``dw`` of shape [M, N, d] on ``grid``.

    ``initial`` holds the standard normals [M, n0] reserved for a random
    initial state (``n0 = 0`` for a deterministic start).
    """

    dw: Array
    grid: TimeGrid
    seed: int
    initial: Array

    @property
    def paths(self) -> int:
        return self.dw.shape[0]

    @property
    def dim(self) -> int:
        return self.dw.shape[2]

    def coarsen(self, factor: int) -> "NoiseEnsemble":
        """Sum groups of ``factor`` consecutive increments (same Brownian path)."""
        factor = int(factor)
        if self.grid.steps % factor:
            raise ValueError("coarsening factor must divide the number of steps")
        if factor == 1:
            return self
        M, N, d = self.dw.shape
        dw = self.dw.reshape(M, N // factor, factor, d).sum(axis=2)
        return NoiseEnsemble(dw, TimeGrid(self.grid.horizon, N // factor), self.seed, self.initial)

    def subset(self, paths: int) -> "NoiseEnsemble":
        return NoiseEnsemble(self.dw[:paths], self.grid, self.seed, self.initial[:paths])


def generate_noise(
    grid: TimeGrid,
    paths: int,
    dim: int,
    seed: int,
    initial_dim: int = 0,
    workers: int = 1,
) -> NoiseEnsemble:
    """Draw ``paths`` independent Brownian increment paths with variance ``dt``."""
    if paths < 1:
        raise ValueError("M must be >= 1")
    per_path = initial_dim + grid.steps * dim
    z = path_normals(seed, paths, per_path, workers=workers)
    initial = z[:, :initial_dim].copy()
    dw = z[:, initial_dim:].reshape(paths, grid.steps, dim) * np.sqrt(grid.dt)
    return NoiseEnsemble(dw, grid, int(seed), initial)
