"""Independent reference solutions for the scalar LQ built-in.

Two families of oracles are provided and neither touches the Monte Carlo
solvers:

* Exact first and second moments of the *discrete* Euler / regression scheme
  under an open-loop control.  These give the expected cost that the
  simulator converges to as M grows, with no time-discretization bias, and
  make the cost an explicit convex quadratic in the per-step mean action.
* Continuous-time ODEs for the decoupling fields of the backward state and
  of the adjoint, integrated with ``scipy.integrate.solve_ivp``.

The adjoint oracle uses the affine ansatz ``p = Rx x + r + S k`` with

    Rx' = -2 A Rx - Q,          Rx(T) = QT
    S'  = (a2 - A) S + a1,      S(T)  = G
    r'  = -A r - Rx B abar,     r(T)  = 0
    P   = Rx sigmabar - a3 S k

and ``dk = -a2 k dt - a3 k dW``, ``k_0 = Q0 y_0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize

from .builtins import LQParams
from .problem import ActionGrid, RelaxedControl, TimeGrid

Array = np.ndarray


@dataclass
class DiscreteMoments:
    mean: Array       # E x_i, [N+1]
    var: Array        # Var x_i, [N+1]
    alpha: Array      # y_i = alpha_i x_i + beta_i, [N+1]
    beta: Array
    y0: float
    cost: float


def discrete_moments(params: LQParams, grid: TimeGrid, abar, a2bar) -> DiscreteMoments:
    """Moments and expected cost of the Euler scheme for one open-loop control.

    ``abar`` and ``a2bar`` are the per-step first and second moments of the
    control's measure.  Batched inputs of shape [B, N] are accepted and return
    arrays with a leading batch axis.
    """
    p = params
    abar = np.asarray(abar, dtype=float)
    a2bar = np.asarray(a2bar, dtype=float)
    N, dt = grid.steps, grid.dt
    lead = abar.shape[:-1]
    mean = np.empty(lead + (N + 1,))
    var = np.empty(lead + (N + 1,))
    mean[..., 0] = p.x0
    var[..., 0] = 0.0
    # the relaxed diffusion integrates sigma against the measure before squaring;
    # only the running cost sees the second moment
    sig = p.S0 + p.S1 * abar
    sig2 = sig ** 2
    growth = 1.0 + p.A * dt
    for i in range(N):
        mean[..., i + 1] = growth * mean[..., i] + p.B * abar[..., i] * dt
        var[..., i + 1] = growth ** 2 * var[..., i] + sig2[..., i] * dt
    alpha = np.empty(N + 1)
    beta = np.empty(lead + (N + 1,))
    alpha[N] = p.G
    beta[..., N] = 0.0
    for i in range(N - 1, -1, -1):
        alpha[i] = alpha[i + 1] * growth * (1 - p.a2 * dt) - p.a1 * dt
        beta[..., i] = (alpha[i + 1] * p.B * abar[..., i] * dt + beta[..., i + 1]) * (1 - p.a2 * dt) \
            - p.a3 * alpha[i + 1] * sig[..., i] * dt
    y0 = alpha[0] * p.x0 + beta[..., 0]
    second = mean ** 2 + var
    running = 0.5 * (p.Q * second[..., :N] + p.R * a2bar).sum(axis=-1) * dt
    total = 0.5 * p.QT * second[..., N] + 0.5 * p.Q0 * y0 ** 2 + running
    return DiscreteMoments(mean, var, alpha, beta, y0, total)


def control_moments(control: RelaxedControl) -> tuple[Array, Array]:
    pts = control.grid.points[:, 0]
    return control.weights @ pts, control.weights @ pts ** 2


def expected_cost(params: LQParams, grid: TimeGrid, control: RelaxedControl) -> float:
    m1, m2 = control_moments(control)
    return float(discrete_moments(params, grid, m1, m2).cost)


def _quadratic_form(fun, N: int):
    """Exact (H, g, c) of a quadratic ``fun(a) = a'Ha/2 + g'a + c`` by polarization."""
    eye = np.eye(N)
    probes = [np.zeros(N)]
    probes += list(eye) + list(-eye)
    pairs = [(i, j) for i in range(N) for j in range(i + 1, N)]
    probes += [eye[i] + eye[j] for i, j in pairs]
    vals = fun(np.array(probes))
    c = vals[0]
    plus, minus = vals[1:N + 1], vals[N + 1:2 * N + 1]
    g = 0.5 * (plus - minus)
    H = np.diag(plus + minus - 2 * c)
    for (i, j), v in zip(pairs, vals[2 * N + 1:]):
        H[i, j] = H[j, i] = v - plus[i] - plus[j] + c
    return H, g, c


@dataclass
class OracleOptimum:
    actions: Array    # per-step mean action of the optimum, [N]
    cost: float


def optimal_open_loop(params: LQParams, grid: TimeGrid, lower: float, upper: float) -> OracleOptimum:
    """Exact minimizer over open-loop strict actions in ``[lower, upper]^N``."""
    N = grid.steps
    H, g, c = _quadratic_form(lambda a: discrete_moments(params, grid, a, a ** 2).cost, N)
    return _box_qp(H, g, c, lower, upper)


def optimal_relaxed_two_point(params: LQParams, grid: TimeGrid) -> OracleOptimum:
    """Relaxed optimum on {-1, +1}: the second moment is pinned at 1."""
    N = grid.steps
    one = np.ones(N)
    H, g, c = _quadratic_form(lambda a: discrete_moments(params, grid, a, np.broadcast_to(one, a.shape)).cost, N)
    return _box_qp(H, g, c, -1.0, 1.0)


def _box_qp(H, g, c, lower, upper) -> OracleOptimum:
    N = g.size
    res = minimize(lambda a: 0.5 * a @ H @ a + g @ a + c, np.zeros(N), jac=lambda a: H @ a + g,
                   method="L-BFGS-B", bounds=[(lower, upper)] * N,
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 10000})
    a = np.clip(res.x, lower, upper)
    return OracleOptimum(a, float(0.5 * a @ H @ a + g @ a + c))


def grid_mix(actions, grid: ActionGrid) -> RelaxedControl:
    """Relaxed control whose step-i measure sits on the two grid neighbours of
    ``actions[i]`` with mean exactly ``actions[i]``."""
    pts = grid.points[:, 0]
    order = np.argsort(pts)
    sp = pts[order]
    actions = np.asarray(actions, dtype=float)
    w = np.zeros((actions.size, grid.size))
    for i, a in enumerate(actions):
        a = min(max(a, sp[0]), sp[-1])
        j = int(np.searchsorted(sp, a, side="right")) - 1
        j = min(j, sp.size - 2)
        lam = (a - sp[j]) / (sp[j + 1] - sp[j])
        lam = min(max(lam, 0.0), 1.0)
        w[i, order[j]] += 1.0 - lam
        w[i, order[j + 1]] += lam
    return RelaxedControl(w, grid)


def nearest_grid_control(actions, grid: ActionGrid) -> RelaxedControl:
    pts = grid.points[:, 0]
    idx = np.argmin(np.abs(np.asarray(actions)[:, None] - pts[None, :]), axis=1)
    w = np.zeros((idx.size, grid.size))
    w[np.arange(idx.size), idx] = 1.0
    return RelaxedControl(w, grid)


def grid_bias_bound(params: LQParams, grid: ActionGrid, horizon: float) -> float:
    """Extra cost of restricting a quadratic-in-action running cost to a grid of spacing h."""
    h = grid.spacing()
    return 0.5 * params.R * (h / 2) ** 2 * horizon


@dataclass
class RiccatiFields:
    """Decoupling fields on the time nodes, [N+1] each."""
    t: Array
    Rx: Array
    S: Array
    r: Array
    alpha: Array
    beta: Array
    a3: float

    def p(self, x: Array, k: Array) -> Array:
        """Adjoint ``p`` on paths; ``x`` and ``k`` are [M, N+1]."""
        return self.Rx[None, :] * x + self.r[None, :] + self.S[None, :] * k

    def P(self, k: Array, sigbar: Array) -> Array:
        """Adjoint diffusion loading on paths; ``k`` is [M, N+1], result [M, N]."""
        return self.Rx[None, :-1] * sigbar[None, :] - self.a3 * self.S[None, :-1] * k[:, :-1]


def riccati_fields(params: LQParams, grid: TimeGrid, abar, sigbar) -> RiccatiFields:
    """Integrate the continuous-time decoupling ODEs backward with a piecewise-constant control."""
    p = params
    abar = np.asarray(abar, dtype=float)
    sigbar = np.asarray(sigbar, dtype=float)
    t = grid.nodes
    N = grid.steps
    out = np.empty((N + 1, 5))
    # state: Rx, S, r, alpha, beta
    out[N] = [p.QT, p.G, 0.0, p.G, 0.0]

    for i in range(N - 1, -1, -1):
        ai, si = abar[i], sigbar[i]

        def rhs(_, u, ai=ai, si=si):
            Rx, S, r, al, be = u
            return [-2 * p.A * Rx - p.Q,
                    (p.a2 - p.A) * S + p.a1,
                    -p.A * r - Rx * p.B * ai,
                    p.a1 + (p.a2 - p.A) * al,
                    p.a2 * be + p.a3 * al * si - al * p.B * ai]

        sol = solve_ivp(rhs, (t[i + 1], t[i]), out[i + 1], method="DOP853", rtol=1e-11, atol=1e-13)
        out[i] = sol.y[:, -1]
    return RiccatiFields(t, out[:, 0], out[:, 1], out[:, 2], out[:, 3], out[:, 4], p.a3)
