"""Controlled FBSDE problems, discretizations and control representations.

Array conventions used throughout the package (M paths):

    x : [M, n]        y : [M, m]        z : [M, m, d]
    b : [M, n]        sigma : [M, n, d] f : [M, m]     phi : [M, m]
    g, h, l : [M]

Derivative callbacks follow "output axes first, then the differentiated axes":

    b_x : [M, n, n]       sigma_x : [M, n, d, n]
    f_x : [M, m, n]       f_y : [M, m, m]         f_z : [M, m, m, d]
    phi_x : [M, m, n]     g_x : [M, n]            h_y : [M, m]
    l_x : [M, n]          l_y : [M, m]            l_z : [M, m, d]

Every callback that depends on the control receives a single action vector
``a`` of shape [k_act] and must be vectorized over the path axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

ROW_SUM_TOL = 1e-12

Array = np.ndarray


class NonFiniteCoefficientError(FloatingPointError):
    """A coefficient callback returned NaN or Inf at a probe point."""

    def __init__(self, callback: str, probe: dict):
        self.callback = callback
        self.probe = probe
        super().__init__(f"callback {callback!r} returned a non-finite value at {probe}")


@dataclass(frozen=True)
class DimensionSignature:
    n: int
    m: int
    d: int
    k_act: int

    def __post_init__(self):
        for name in ("n", "m", "d", "k_act"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"dimension {name} must be >= 1")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if int(self.steps) < 1:
            raise ValueError("steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> Array:
        t = np.arange(self.steps + 1) * self.dt
        t[-1] = self.horizon
        return t

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * int(factor))


@dataclass(eq=False)
class ActionGrid:
    """Finite, pairwise-distinct set of actions inside an axis-aligned box."""

    points: Array
    lower: Array
    upper: Array

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        lo = np.broadcast_to(np.asarray(self.lower, dtype=float), pts.shape[1:]).copy()
        hi = np.broadcast_to(np.asarray(self.upper, dtype=float), pts.shape[1:]).copy()
        if pts.shape[0] == 0:
            raise ValueError("action grid must be nonempty")
        if np.any(lo > hi):
            raise ValueError("action bounds must satisfy lower <= upper")
        if np.any(pts < lo) or np.any(pts > hi):
            raise ValueError("action grid points must lie inside the bounds")
        if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
            raise ValueError("action grid points must be pairwise distinct")
        pts.setflags(write=False)
        self.points, self.lower, self.upper = pts, lo, hi

    @classmethod
    def uniform(cls, lower: float, upper: float, count: int) -> "ActionGrid":
        """Scalar grid of ``count`` equally spaced actions on [lower, upper]."""
        if count == 1:
            pts = np.array([0.5 * (lower + upper)])
        else:
            pts = np.linspace(lower, upper, count)
        return cls(pts[:, None], lower, upper)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.size

    def __getitem__(self, idx) -> Array:
        return self.points[idx]

    def permuted(self, perm) -> "ActionGrid":
        return ActionGrid(self.points[np.asarray(perm)], self.lower, self.upper)

    def spacing(self) -> float:
        """Largest gap between consecutive points of a scalar grid."""
        if self.size == 1:
            return 0.0
        s = np.sort(self.points[:, 0])
        return float(np.max(np.diff(s)))


@dataclass(eq=False)
class FbsdeProblem:
    """Coefficients, costs and their partial derivatives (see module docstring)."""

    dims: DimensionSignature
    b: Callable
    sigma: Callable
    f: Callable
    phi: Callable
    g: Callable
    h: Callable
    l: Callable
    b_x: Callable
    sigma_x: Callable
    f_x: Callable
    f_y: Callable
    f_z: Callable
    phi_x: Callable
    g_x: Callable
    h_y: Callable
    l_x: Callable
    l_y: Callable
    l_z: Callable
    x0: Array
    # maps standard normals [M, n] to initial states [M, n]
    x0_sampler: Optional[Callable[[Array], Array]] = None
    name: str = "custom"
    # control-independent terminal value y_T, assumed by the sufficiency check
    fixed_terminal: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.dims.n)

    @property
    def initial_dim(self) -> int:
        """Number of standard normals per path consumed by the initial state."""
        return 0 if self.x0_sampler is None else self.dims.n

    def initial_state(self, paths: int, normals: Optional[Array] = None) -> Array:
        if self.x0_sampler is None:
            return np.broadcast_to(self.x0, (paths, self.dims.n)).copy()
        if normals is None:
            raise ValueError("a random initial state needs initial normals from the noise ensemble")
        x = np.asarray(self.x0_sampler(normals), dtype=float)
        return x.reshape(paths, self.dims.n)

    def replace(self, **changes) -> "FbsdeProblem":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(eq=False)
class StrictControl:
    """Action-grid indices, open-loop ``[N]`` or per path ``[N, M]``."""

    indices: Array
    grid: ActionGrid

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim not in (1, 2):
            raise ValueError("strict control indices must have shape [N] or [N, M]")
        if not np.issubdtype(idx.dtype, np.integer):
            if np.any(idx != np.round(idx)):
                raise ValueError("strict control indices must be integers")
            idx = idx.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.grid.size):
            raise ValueError("strict control index outside the action grid")
        idx = idx.astype(np.int64)
        idx.setflags(write=False)
        self.indices = idx

    @property
    def steps(self) -> int:
        return self.indices.shape[0]

    @property
    def per_path(self) -> bool:
        return self.indices.ndim == 2

    def actions(self) -> Array:
        return self.grid.points[self.indices]

    def __eq__(self, other):
        return (
            isinstance(other, StrictControl)
            and other.grid is self.grid
            and np.array_equal(other.indices, self.indices)
        )


@dataclass(eq=False)
class RelaxedControl:
    """Deterministic open-loop path of probability weights over an action grid."""

    weights: Array
    grid: ActionGrid

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[1] != self.grid.size:
            raise ValueError(f"weights must have shape [N, {self.grid.size}]")
        check_simplex(w)
        w.setflags(write=False)
        self.weights = w

    @property
    def steps(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def uniform(cls, grid: ActionGrid, steps: int) -> "RelaxedControl":
        return cls(np.full((steps, grid.size), 1.0 / grid.size), grid)

    def perturb(self, other: "RelaxedControl", theta: float) -> "RelaxedControl":
        """Convex perturbation ``self + theta * (other - self)``."""
        if not 0.0 <= theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if other.grid is not self.grid or other.steps != self.steps:
            raise ValueError("perturbation direction lives on a different grid")
        return RelaxedControl(self.weights + theta * (other.weights - self.weights), self.grid)

    def refine(self, factor: int) -> "RelaxedControl":
        return RelaxedControl(np.repeat(self.weights, int(factor), axis=0), self.grid)

    def mean_action(self) -> Array:
        return self.weights @ self.grid.points

    def is_dirac(self) -> bool:
        return bool(np.all(np.max(self.weights, axis=1) == 1.0))


def check_simplex(weights: Array, tol: float = ROW_SUM_TOL) -> None:
    w = np.asarray(weights)
    if not np.all(np.isfinite(w)):
        raise ValueError("relaxed control weights must be finite")
    if np.any(w < 0):
        raise ValueError("relaxed control weights must be nonnegative")
    err = np.abs(w.sum(axis=1) - 1.0)
    if np.any(err > tol):
        bad = int(np.argmax(err))
        raise ValueError(f"relaxed control row {bad} sums to {w[bad].sum()!r}, not 1")


def dirac_embed(u: StrictControl, grid: Optional[ActionGrid] = None) -> RelaxedControl:
    """Embed an open-loop strict control as one-hot measure rows."""
    grid = u.grid if grid is None else grid
    if grid is not u.grid and not np.array_equal(grid.points, u.grid.points):
        raise ValueError("strict control is defined on a different action grid")
    if u.per_path:
        raise ValueError("only open-loop strict controls embed into open-loop relaxed controls")
    w = np.zeros((u.steps, grid.size))
    w[np.arange(u.steps), u.indices] = 1.0
    return RelaxedControl(w, grid)


def nearest_dirac(q: RelaxedControl) -> StrictControl:
    # np.argmax returns the first maximal entry: ties go to the lowest index
    return StrictControl(np.argmax(q.weights, axis=1), q.grid)


# ---------------------------------------------------------------------------
# derivative audit


@dataclass
class ValidationReport:
    tol: float
    discrepancies: dict
    worst_probe: dict

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.discrepancies.values())

    def failures(self) -> list:
        return [k for k, v in self.discrepancies.items() if v > self.tol]

    def summary(self) -> str:
        lines = [f"derivative audit (tol={self.tol:g}): {'pass' if self.passed else 'FAIL'}"]
        for k, v in self.discrepancies.items():
            lines.append(f"  {k:8s} max |fd - declared| = {v:.3e}")
        return "\n".join(lines)


def _finite(name: str, value, probe: dict) -> Array:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1) if arr.ndim else arr[None]))
        row = int(bad[0][0]) if len(bad) else 0
        point = {k: (np.asarray(v)[row].tolist() if np.ndim(v) and np.shape(v)[0] > row else v)
                 for k, v in probe.items()}
        raise NonFiniteCoefficientError(name, point)
    return arr


def _central_difference(fun, arg: Array, step: float) -> Array:
    """Jacobian of ``fun`` w.r.t. the trailing axes of ``arg``; output axes first."""
    base_shape = arg.shape[1:]
    cols = []
    for k in np.ndindex(*base_shape):
        e = np.zeros_like(arg)
        e[(slice(None),) + k] = step
        cols.append((np.asarray(fun(arg + e)) - np.asarray(fun(arg - e))) / (2 * step))
    out = np.stack(cols, axis=-1)
    return out.reshape(out.shape[:-1] + base_shape)


def validate_problem(
    problem: FbsdeProblem,
    grid: ActionGrid,
    tol: float = 1e-5,
    probes: int = 16,
    seed: int = 0,
    radius: float = 1.0,
    step: float = 1e-5,
) -> ValidationReport:
    """Audit every declared derivative against a central finite difference.

    Probe states are drawn uniformly from ``[-radius, radius]`` in every
    coordinate, probe times from ``[0, 1]``, and each grid action is probed.
    """
    if probes < 1:
        raise ValueError("probe budget must be at least 1")
    dims = problem.dims
    rng = np.random.default_rng(seed)
    t = float(rng.uniform(0.0, 1.0))
    x = rng.uniform(-radius, radius, (probes, dims.n))
    y = rng.uniform(-radius, radius, (probes, dims.m))
    z = rng.uniform(-radius, radius, (probes, dims.m, dims.d))
    probe = {"t": t, "x": x, "y": y, "z": z}

    disc: dict = {}
    worst: dict = {}

    def record(name, declared, numeric, where):
        declared = _finite(name, declared, where)
        err = np.abs(np.broadcast_to(declared, numeric.shape) - numeric)
        per_probe = err.reshape(err.shape[0], -1).max(axis=1)
        j = int(np.argmax(per_probe))
        if per_probe[j] >= disc.get(name, -1.0):
            disc[name] = float(per_probe[j])
            worst[name] = {k: (v[j].tolist() if isinstance(v, np.ndarray) else v) for k, v in where.items()}

    # action-free terms
    _finite("phi", problem.phi(x), probe)
    _finite("g", problem.g(x), probe)
    _finite("h", problem.h(y), probe)
    record("phi_x", problem.phi_x(x), _central_difference(problem.phi, x, step), probe)
    record("g_x", problem.g_x(x), _central_difference(problem.g, x, step), probe)
    record("h_y", problem.h_y(y), _central_difference(problem.h, y, step), probe)

    for a in grid.points:
        where = dict(probe, a=a.tolist())
        _finite("b", problem.b(t, x, a), where)
        _finite("sigma", problem.sigma(t, x, a), where)
        _finite("f", problem.f(t, x, y, z, a), where)
        _finite("l", problem.l(t, x, y, z, a), where)
        record("b_x", problem.b_x(t, x, a), _central_difference(lambda xx: problem.b(t, xx, a), x, step), where)
        record("sigma_x", problem.sigma_x(t, x, a),
               _central_difference(lambda xx: problem.sigma(t, xx, a), x, step), where)
        record("f_x", problem.f_x(t, x, y, z, a),
               _central_difference(lambda xx: problem.f(t, xx, y, z, a), x, step), where)
        record("f_y", problem.f_y(t, x, y, z, a),
               _central_difference(lambda yy: problem.f(t, x, yy, z, a), y, step), where)
        record("f_z", problem.f_z(t, x, y, z, a),
               _central_difference(lambda zz: problem.f(t, x, y, zz, a), z, step), where)
        record("l_x", problem.l_x(t, x, y, z, a),
               _central_difference(lambda xx: problem.l(t, xx, y, z, a), x, step), where)
        record("l_y", problem.l_y(t, x, y, z, a),
               _central_difference(lambda yy: problem.l(t, x, yy, z, a), y, step), where)
        record("l_z", problem.l_z(t, x, y, z, a),
               _central_difference(lambda zz: problem.l(t, x, y, zz, a), z, step), where)
    return ValidationReport(tol=tol, discrepancies=disc, worst_probe=worst)
