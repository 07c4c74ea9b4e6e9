"""Built-in problem catalog.

``lq``
    Scalar linear-quadratic FBSDE with the control in both drift and diffusion::

        b = A x + B a,   sigma = S0 + S1 a,   f = -(a1 x + a2 y + a3 z),
        phi = G x,  g = QT x^2 / 2,  h = Q0 y^2 / 2,  l = (Q x^2 + R a^2) / 2

``forward_only``
    Same forward dynamics and costs with y = z = f = h = 0.

``bang_bang``
    The ``lq`` family on the two-point action set {-1, +1}.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .problem import ActionGrid, DimensionSignature, FbsdeProblem


@dataclass(frozen=True)
class LQParams:
    A: float = -0.3
    B: float = 1.0
    S0: float = 0.4
    S1: float = 0.3
    a1: float = 0.4
    a2: float = 0.3
    a3: float = 0.5
    G: float = 0.8
    QT: float = 1.0
    Q0: float = 0.5
    Q: float = 1.0
    R: float = 1.0
    x0: float = 1.0

    def updated(self, **kw) -> "LQParams":
        known = {f.name for f in fields(self)}
        unknown = set(kw) - known
        if unknown:
            raise KeyError(f"unknown LQ parameters: {sorted(unknown)}")
        return replace(self, **{k: float(v) for k, v in kw.items()})


BANG_BANG_DEFAULTS = LQParams(A=0.5, B=1.0, S0=0.4, S1=0.2, a1=0.4, a2=0.3, a3=0.5,
                              G=0.8, QT=2.0, Q0=0.5, Q=2.0, R=1.0, x0=2.0)


def _full(x, val, *trail):
    return np.full((x.shape[0],) + trail, float(val))


def lq_problem(params: LQParams = LQParams(), *, forward_only: bool = False, name: str = "lq") -> FbsdeProblem:
    p = params
    dims = DimensionSignature(n=1, m=1, d=1, k_act=1)

    def b(t, x, a):
        return p.A * x + p.B * a[0]

    def sigma(t, x, a):
        return _full(x, p.S0 + p.S1 * a[0], 1, 1)

    def g(x):
        return 0.5 * p.QT * x[:, 0] ** 2

    def l(t, x, y, z, a):
        return 0.5 * (p.Q * x[:, 0] ** 2 + p.R * a[0] ** 2)

    def b_x(t, x, a):
        return _full(x, p.A, 1, 1)

    def sigma_x(t, x, a):
        return _full(x, 0.0, 1, 1, 1)

    def g_x(x):
        return p.QT * x

    def l_x(t, x, y, z, a):
        return p.Q * x

    def l_y(t, x, y, z, a):
        return np.zeros_like(y)

    def l_z(t, x, y, z, a):
        return np.zeros_like(z)

    if forward_only:
        def f(t, x, y, z, a):
            return np.zeros_like(y)

        def phi(x):
            return np.zeros((x.shape[0], 1))

        def h(y):
            return np.zeros(y.shape[0])

        def f_x(t, x, y, z, a):
            return _full(x, 0.0, 1, 1)

        f_y = f_x

        def f_z(t, x, y, z, a):
            return _full(x, 0.0, 1, 1, 1)

        def phi_x(x):
            return _full(x, 0.0, 1, 1)

        def h_y(y):
            return np.zeros_like(y)
    else:
        def f(t, x, y, z, a):
            return -(p.a1 * x + p.a2 * y + p.a3 * z[:, :, 0])

        def phi(x):
            return p.G * x

        def h(y):
            return 0.5 * p.Q0 * y[:, 0] ** 2

        def f_x(t, x, y, z, a):
            return _full(x, -p.a1, 1, 1)

        def f_y(t, x, y, z, a):
            return _full(x, -p.a2, 1, 1)

        def f_z(t, x, y, z, a):
            return _full(x, -p.a3, 1, 1, 1)

        def phi_x(x):
            return _full(x, p.G, 1, 1)

        def h_y(y):
            return p.Q0 * y

    return FbsdeProblem(
        dims=dims, b=b, sigma=sigma, f=f, phi=phi, g=g, h=h, l=l,
        b_x=b_x, sigma_x=sigma_x, f_x=f_x, f_y=f_y, f_z=f_z, phi_x=phi_x,
        g_x=g_x, h_y=h_y, l_x=l_x, l_y=l_y, l_z=l_z,
        x0=np.array([p.x0]), name=name, params=asdict(p),
    )


def lq_action_grid(lower: float = -2.0, upper: float = 2.0, count: int = 21) -> ActionGrid:
    return ActionGrid.uniform(lower, upper, count)


def bang_bang_grid() -> ActionGrid:
    return ActionGrid(np.array([[-1.0], [1.0]]), -1.0, 1.0)


CATALOG = ("lq", "forward_only", "bang_bang")


def builtin(name: str, overrides: dict | None = None, grid: dict | None = None):
    """Return ``(problem, action_grid)`` for a catalog entry."""
    overrides = overrides or {}
    grid = grid or {}
    if name == "lq":
        params = LQParams().updated(**overrides)
        return lq_problem(params), lq_action_grid(**grid)
    if name == "forward_only":
        params = LQParams().updated(**overrides)
        return lq_problem(params, forward_only=True, name="forward_only"), lq_action_grid(**grid)
    if name == "bang_bang":
        params = BANG_BANG_DEFAULTS.updated(**overrides)
        return lq_problem(params, name="bang_bang"), bang_bang_grid()
    raise KeyError(f"unknown built-in problem {name!r}; choose from {CATALOG}")
