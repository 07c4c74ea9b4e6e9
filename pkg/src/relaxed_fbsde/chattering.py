"""Strict approximations of relaxed controls by fast switching, and the related experiments.

Each time step of a relaxed control is split into ``r`` equal slots.  Slots
are apportioned to the grid actions by largest remainders (ties to the lowest
index), so the occupation frequency of every action is within ``1/r`` of its
weight, and are then laid out round-robin by descending weight.
"""

from __future__ import annotations

import csv
import io
import itertools
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bsde import RegressionBasis, cost, solve_paths
from .noise import NoiseEnsemble
from .problem import ActionGrid, FbsdeProblem, RelaxedControl, StrictControl
from .report import fmt

Array = np.ndarray


def apportion(weights: Array, r: int) -> Array:
    """Largest-remainder slot counts summing to ``r``."""
    quota = np.asarray(weights, dtype=float) * r
    counts = np.floor(quota).astype(int)
    short = r - int(counts.sum())
    if short > 0:
        frac = quota - counts
        # stable sort on the negated remainders keeps the lowest index first among ties
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def slot_sequence(weights: Array, r: int) -> Array:
    counts = apportion(weights, r)
    order = [j for j in np.argsort(-np.asarray(weights), kind="stable") if counts[j] > 0]
    left = counts.copy()
    seq = []
    while len(seq) < r:
        for j in order:
            if left[j]:
                seq.append(j)
                left[j] -= 1
    return np.array(seq, dtype=int)


def chatter_project(q: RelaxedControl, r: int) -> StrictControl:
    """Strict control on the grid refined ``r`` times whose slot frequencies track ``q``."""
    r = int(r)
    if r < 1:
        raise ValueError("refinement must be >= 1")
    idx = np.concatenate([slot_sequence(row, r) for row in q.weights])
    return StrictControl(idx, q.grid)


def frequency_error(q: RelaxedControl, u: StrictControl, r: int) -> float:
    """Largest per-step gap between slot frequencies of ``u`` and the weights of ``q``."""
    slots = u.indices.reshape(q.steps, r)
    freq = np.stack([np.bincount(s, minlength=q.grid.size) for s in slots]) / r
    return float(np.abs(freq - q.weights).max())


@dataclass
class StabilityTable:
    r: Array
    dx2: Array
    dy2: Array
    dz2: Array
    cost_gap: Array
    stderr: dict
    freq_error: Array

    COLUMNS = ("r", "dx2", "dy2", "dz2", "cost_gap")

    def column(self, name: str) -> Array:
        return getattr(self, name)

    def monotone(self, name: str, allowed: int = 1, k: float = 2.0) -> bool:
        """Nonincreasing in r up to ``k`` combined standard errors, with ``allowed`` violations."""
        v, s = self.column(name), self.stderr[name]
        excess = v[1:] - v[:-1] - k * np.hypot(s[1:], s[:-1])
        return int(np.sum(excess > 0)) <= allowed

    def violations(self, name: str, k: float = 2.0) -> int:
        v, s = self.column(name), self.stderr[name]
        return int(np.sum(v[1:] - v[:-1] - k * np.hypot(s[1:], s[:-1]) > 0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for j in range(self.r.size):
            w.writerow([int(self.r[j])] + [fmt(self.column(c)[j]) for c in self.COLUMNS[1:]])
        return buf.getvalue()


def _mean_se(per_path: Array) -> tuple[float, float]:
    M = per_path.shape[0]
    return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(M)) if M > 1 else float("inf")


def _level_gaps(problem, q, r, noise, basis):
    """Per-path gap samples at one refinement level (``dx2``/``dy2`` at their worst time)."""
    dt = noise.grid.dt
    qr = q.refine(r)
    u = chatter_project(q, r)
    rel = solve_paths(problem, qr, noise, basis)
    strict = solve_paths(problem, u, noise, basis)
    sx = np.sum((strict.x - rel.x) ** 2, axis=2)
    sy = np.sum((strict.y - rel.y) ** 2, axis=2)
    sz = np.sum((strict.z - rel.z).reshape(noise.paths, noise.grid.steps, -1) ** 2, axis=2)
    out = {
        "dx2": sx[:, int(np.argmax(sx.mean(axis=0)))],
        "dy2": sy[:, int(np.argmax(sy.mean(axis=0)))],
        "dz2": sz.sum(axis=1) * dt,
        "cost_gap": cost(problem, u, strict).per_path - cost(problem, qr, rel).per_path,
    }
    return out, frequency_error(q, u, r)


def stability_check(
    problem: FbsdeProblem,
    q: RelaxedControl,
    refinements: Sequence[int],
    fine_noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
    batches: int = 1,
) -> StabilityTable:
    """Gaps between chattered strict and relaxed systems on shared noise.

    ``fine_noise`` lives on ``q.steps * max(refinements)`` steps; each level
    sums it down to ``q.steps * r`` so all levels see the same Brownian path,
    and both systems are simulated on that refined grid.

    With ``batches > 1`` the paths are split into that many disjoint groups,
    each solved independently (its own regressions), and standard errors come
    from the spread of the group estimates.  Path-level standard errors ignore
    the variability of the regression fits, which dominates the ``y`` and
    ``z`` gaps once the trajectories are close.
    """
    rs = [int(r) for r in refinements]
    if any(b <= a for a, b in zip(rs, rs[1:])):
        raise ValueError("refinements must be increasing")
    top = q.steps * rs[-1]
    if fine_noise.grid.steps != top:
        raise ValueError(f"fine noise must have {top} steps")
    if any(rs[-1] % r for r in rs):
        raise ValueError("every refinement must divide the largest one")
    names = ("dx2", "dy2", "dz2", "cost_gap")
    cols = {c: [] for c in names}
    errs = {c: [] for c in names}
    ferr = []
    groups = np.array_split(np.arange(fine_noise.paths), int(batches))
    for r in rs:
        noise = fine_noise.coarsen(rs[-1] // r)
        if batches <= 1:
            per, fe = _level_gaps(problem, q, r, noise, basis)
            for c in names:
                m, s = _mean_se(per[c])
                cols[c].append(abs(m) if c == "cost_gap" else m)
                errs[c].append(s)
        else:
            est = {c: [] for c in names}
            for g in groups:
                sub = NoiseEnsemble(noise.dw[g], noise.grid, noise.seed, noise.initial[g])
                per, fe = _level_gaps(problem, q, r, sub, basis)
                for c in names:
                    est[c].append(per[c].mean())
            for c in names:
                m, s = _mean_se(np.array(est[c]))
                cols[c].append(abs(m) if c == "cost_gap" else m)
                errs[c].append(s)
        ferr.append(fe)
    return StabilityTable(np.array(rs), *(np.array(cols[c]) for c in names),
                          stderr={c: np.array(v) for c, v in errs.items()}, freq_error=np.array(ferr))


@dataclass
class ValueGapResult:
    strict_min: float
    strict_stderr: float
    strict_argmin: Array
    relaxed_value: float
    relaxed_stderr: float
    gap: float
    gap_stderr: float
    enumerated: int
    exhaustive: bool


def value_gap(
    problem: FbsdeProblem,
    grid: ActionGrid,
    relaxed: RelaxedControl,
    noise: NoiseEnsemble,
    basis: RegressionBasis = RegressionBasis(),
    budget: int = 4096,
    samples: int = 512,
    seed: int = 0,
) -> ValueGapResult:
    """``|min_u J(u) - J(relaxed)|`` over open-loop strict controls on shared noise.

    All ``K^N`` controls are enumerated when that fits in ``budget``; otherwise
    ``samples`` random controls are scanned and a warning is issued.
    """
    N, K = noise.grid.steps, grid.size
    exhaustive = K ** N <= budget
    if exhaustive:
        candidates = itertools.product(range(K), repeat=N)
    else:
        warnings.warn(f"{K}^{N} strict controls exceed the enumeration budget; sampling {samples}", RuntimeWarning)
        rng = np.random.default_rng(seed)
        candidates = (tuple(row) for row in rng.integers(0, K, size=(samples, N)))
    rel = cost(problem, relaxed, solve_paths(problem, relaxed, noise, basis))
    best = None
    count = 0
    for idx in candidates:
        u = StrictControl(np.array(idx, dtype=int), grid)
        c = cost(problem, u, solve_paths(problem, u, noise, basis))
        count += 1
        if best is None or c.value < best[0].value:
            best = (c, np.array(idx, dtype=int))
    c, idx = best
    m, s = _mean_se(c.per_path - rel.per_path)
    return ValueGapResult(c.value, c.stderr, idx, rel.value, rel.stderr, abs(m), s, count, exhaustive)
