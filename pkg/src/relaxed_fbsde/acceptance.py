"""The acceptance suite: twelve pass/fail checks at fixed scale and tolerance.

Every check is a function ``(AcceptanceConfig) -> CriterionResult`` and is
deterministic given the configuration.  Results carry their CSV artifacts so
the command-line driver can write them and the determinism check can compare
them byte for byte.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .adjoint import solve_adjoint
from .bsde import RegressionBasis, cost, solve_paths
from .builtins import BANG_BANG_DEFAULTS, LQParams, builtin
from .chattering import chatter_project, frequency_error, stability_check, value_gap
from .hamiltonian import check_sufficiency, mp_residual
from .lq_oracle import (control_moments, grid_bias_bound, grid_mix, optimal_open_loop,
                        riccati_fields)
from .noise import generate_noise
from .optimizer import OptimizerConfig, optimize
from .problem import RelaxedControl, StrictControl, TimeGrid, dirac_embed
from .report import csv_text, fmt, with_header
from .variational import (convergence_probe, directional_derivative, hamiltonian_difference,
                          solve_variational, variational_inequality_value)

THETAS = (0.2, 0.1, 0.05, 0.025)


@dataclass(frozen=True)
class AcceptanceConfig:
    seed: int = 2024
    paths: int = 10_000
    paths_large: int = 100_000
    steps: int = 50
    horizon: float = 1.0
    degree: int = 2
    workers: int = 1
    random_controls: int = 100
    duality_pairs: int = 20
    derivative_pairs: int = 10
    fw_iters: int = 50
    refinements: tuple = (1, 2, 4, 8, 16)
    batches: int = 10
    bang_steps: int = 6
    # reduced scale used by the determinism replay
    replay_paths: int = 1_000

    def meta(self) -> dict:
        """Experiment parameters for artifact headers (the worker count is an execution detail)."""
        d = asdict(self)
        d.pop("workers")
        d["refinements"] = " ".join(str(r) for r in self.refinements)
        return d

    def reduced(self) -> "AcceptanceConfig":
        p = self.replay_paths
        return replace(self, paths=p, paths_large=2 * p, random_controls=5, duality_pairs=3,
                       derivative_pairs=2, fw_iters=5, batches=2)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    artifacts: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"criterion {self.number:2d} {'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# ------------------------------------------------------------------ helpers

def _setup(cfg: AcceptanceConfig):
    problem, actions = builtin("lq")
    grid = TimeGrid(cfg.horizon, cfg.steps)
    return problem, actions, grid, RegressionBasis(cfg.degree)


def _noise(cfg, grid, paths, offset):
    return generate_noise(grid, paths, 1, cfg.seed + offset, workers=cfg.workers)


def _oracle_control(cfg, actions, grid):
    opt = optimal_open_loop(LQParams(), grid, float(actions.lower[0]), float(actions.upper[0]))
    return opt, grid_mix(opt.actions, actions)


def _random_relaxed(rng, actions, steps):
    return RelaxedControl(rng.dirichlet(np.full(actions.size, 0.3), size=steps), actions)


# ---------------------------------------------------------------- criteria

def dirac_collapse(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths, 1)
    rng = np.random.default_rng(cfg.seed + 1)
    mismatches = 0
    rows = []
    for j in range(cfg.random_controls):
        u = StrictControl(rng.integers(0, actions.size, size=grid.steps), actions)
        mu = dirac_embed(u)
        ps, pr = solve_paths(problem, u, noise, basis), solve_paths(problem, mu, noise, basis)
        cs, cr = cost(problem, u, ps), cost(problem, mu, pr)
        same = (np.array_equal(ps.x, pr.x) and np.array_equal(ps.y, pr.y)
                and np.array_equal(ps.z, pr.z) and np.array_equal(cs.per_path, cr.per_path))
        mismatches += not same
        rows.append((j, cs.value, cr.value, int(same)))
    art = {"c01_dirac_collapse.csv": csv_text(("control", "strict_cost", "relaxed_cost", "identical"), rows, cfg.meta())}
    return CriterionResult(1, "Dirac collapse is bit-identical", mismatches == 0,
                           f"{cfg.random_controls - mismatches}/{cfg.random_controls} controls identical", art)


def adjoint_boundaries(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths, 2)
    mu = _random_relaxed(np.random.default_rng(cfg.seed + 2), actions, grid.steps)
    sol = solve_paths(problem, mu, noise, basis)
    adj = solve_adjoint(problem, mu, sol, noise, basis)
    k0 = problem.h_y(sol.y[:, 0])
    pT = problem.g_x(sol.x[:, -1]) + np.einsum("mj,mjk->mk", adj.k[:, -1], problem.phi_x(sol.x[:, -1]))
    bad_k = int(np.sum(np.any(adj.k[:, 0] != k0, axis=1)))
    bad_p = int(np.sum(np.any(adj.p[:, -1] != pT, axis=1)))
    rows = [("k0", bad_k, float(np.abs(adj.k[:, 0] - k0).max())), ("pT", bad_p, float(np.abs(adj.p[:, -1] - pT).max()))]
    art = {"c02_adjoint_boundaries.csv": csv_text(("condition", "violating_paths", "max_abs_error"), rows, cfg.meta())}
    return CriterionResult(2, "adjoint boundary conditions exact", bad_k == 0 and bad_p == 0,
                           f"violating paths k0={bad_k} pT={bad_p}", art)


def adjoint_vs_riccati(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths_large, 3)
    _, mu = _oracle_control(cfg, actions, grid)
    sol = solve_paths(problem, mu, noise, basis)
    adj = solve_adjoint(problem, mu, sol, noise, basis)
    par = LQParams()
    m1, _ = control_moments(mu)
    fields_ = riccati_fields(par, grid, m1, par.S0 + par.S1 * m1)
    ref = fields_.p(sol.x[:, :, 0], adj.k[:, :, 0])
    err2 = np.mean((adj.p[:, :, 0] - ref) ** 2, axis=0)
    nrm2 = np.mean(ref ** 2, axis=0)
    # trapezoid-free Riemann sum over the N+1 nodes with equal weights dt
    rel = float(np.sqrt(err2.sum() / nrm2.sum()))
    rows = [(i, float(grid.nodes[i]), float(np.sqrt(err2[i] / nrm2[i]))) for i in range(grid.steps + 1)]
    art = {"c03_adjoint_riccati.csv": csv_text(("step", "t", "relative_rmse"), rows, cfg.meta())}
    return CriterionResult(3, "adjoint p matches Riccati oracle", rel <= 0.02,
                           f"relative L2 error {rel:.4%} (limit 2%)", art)


def duality(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths, 4)
    rng = np.random.default_rng(cfg.seed + 4)
    rows, worst, ok = [], 0.0, True
    for j in range(cfg.duality_pairs):
        mu, q = _random_relaxed(rng, actions, grid.steps), _random_relaxed(rng, actions, grid.steps)
        sol = solve_paths(problem, mu, noise, basis)
        adj = solve_adjoint(problem, mu, sol, noise, basis)
        var = solve_variational(problem, mu, q, sol, noise, basis)
        d = variational_inequality_value(problem, sol, var)
        h = hamiltonian_difference(problem, mu, q, sol, adj)
        se = float(np.hypot(d.stderr, h.stderr))
        z = abs(d.value - h.value) / se
        worst = max(worst, z)
        ok &= z <= 3.0
        rows.append((j, d.value, d.stderr, h.value, h.stderr, z))
    art = {"c04_duality.csv": csv_text(("pair", "delta", "delta_stderr", "hamiltonian_diff", "hamiltonian_stderr", "z"), rows, cfg.meta())}
    return CriterionResult(4, "duality identity", ok, f"worst |difference| = {worst:.2f} combined stderr over {cfg.duality_pairs} pairs (limit 3)", art)


def directional(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths, 5)
    rng = np.random.default_rng(cfg.seed + 5)
    rows, worst, ok = [], 0.0, True
    for j in range(cfg.derivative_pairs):
        mu, q = _random_relaxed(rng, actions, grid.steps), _random_relaxed(rng, actions, grid.steps)
        sol = solve_paths(problem, mu, noise, basis)
        var = solve_variational(problem, mu, q, sol, noise, basis)
        d = variational_inequality_value(problem, sol, var)
        dd = directional_derivative(problem, mu, q, THETAS, noise, basis, base=cost(problem, mu, sol))
        se = float(np.hypot(dd.intercept_stderr, d.stderr))
        z = abs(dd.intercept - d.value) / se
        worst = max(worst, z)
        ok &= z <= 3.0
        rows.append((j, d.value, d.stderr, dd.intercept, dd.intercept_stderr, z, *dd.quotients))
    cols = ("pair", "delta", "delta_stderr", "intercept", "intercept_stderr", "z") + tuple(f"quotient_{t}" for t in THETAS)
    art = {"c05_directional_derivative.csv": csv_text(cols, rows, cfg.meta())}
    return CriterionResult(5, "directional derivative extrapolates to delta", ok,
                           f"worst |difference| = {worst:.2f} combined stderr over {cfg.derivative_pairs} pairs (limit 3)", art)


def convergence(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths, 6)
    rng = np.random.default_rng(cfg.seed + 6)
    mu, q = _random_relaxed(rng, actions, grid.steps), _random_relaxed(rng, actions, grid.steps)
    table = convergence_probe(problem, mu, q, THETAS, noise, basis)
    mono = {c: table.monotone(c) for c in table.COLUMNS[1:]}
    slope = table.slope("dx2")
    ok = all(mono.values()) and 1.6 <= slope <= 2.4
    bad = [c for c, v in mono.items() if not v]
    art = {"c06_convergence.csv": with_header(table.to_csv(), cfg.meta())}
    return CriterionResult(6, "perturbation convergence", ok,
                           f"non-monotone columns {bad or 'none'}; x-gap log-log slope {slope:.3f} (band [1.6, 2.4])", art)


def _grid_bound(actions):
    h = actions.spacing()
    return 0.5 * LQParams().R * (h / 2) ** 2


def maximum_principle(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths, 7)
    opt, mu = _oracle_control(cfg, actions, grid)
    sol = solve_paths(problem, mu, noise, basis)
    rep = mp_residual(problem, mu, sol, solve_adjoint(problem, mu, sol, noise, basis))
    bound = _grid_bound(actions)
    ok_opt = bool(np.all(rep.gap <= bound + 3 * rep.stderr))
    # swap the middle step to the grid action farthest from the optimum
    step = grid.steps // 2
    worst = int(np.argmax(np.abs(actions.points[:, 0] - opt.actions[step])))
    w = mu.weights.copy()
    w[step] = 0.0
    w[step, worst] = 1.0
    bad = RelaxedControl(w, actions)
    sol_b = solve_paths(problem, bad, noise, basis)
    rep_b = mp_residual(problem, bad, sol_b, solve_adjoint(problem, bad, sol_b, noise, basis))
    zb = rep_b.gap[step] / rep_b.stderr[step]
    ok = ok_opt and zb > 5.0
    meta = cfg.meta() | {"grid_bound": bound, "perturbed_step": step}
    art = {"c07_mp_oracle.csv": csv_text(rep.COLUMNS, rep.rows(), meta),
           "c07_mp_perturbed.csv": csv_text(rep_b.COLUMNS, rep_b.rows(), meta)}
    return CriterionResult(7, "maximum-principle certificate", ok,
                           f"oracle residual {rep.global_residual:.3g} vs bound {bound:.3g}+3se; "
                           f"perturbed step gap {zb:.1f} stderr (need > 5)", art)


def optimizer_convergence(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    opt, _ = _oracle_control(cfg, actions, grid)
    conf = OptimizerConfig(paths=cfg.paths, seed=cfg.seed + 800, max_iters=cfg.fw_iters, basis=basis, workers=cfg.workers)
    mu, rep, state = optimize(problem, RelaxedControl.uniform(actions, grid.steps), grid, conf)
    final = state.history[-1]
    bias = grid_bias_bound(LQParams(), actions, grid.horizon)
    close = abs(final.cost - opt.cost) <= bias + 3 * final.stderr
    # accepted steps are compared on the noise of their own iteration
    monotone = all(not (h.step_cost > h.cost + h.stderr) for h in state.history if h.step_cost == h.step_cost)
    gaps_ok = all(h.fw_gap >= 0.0 for h in state.history)
    iters = len(state.history) - 1
    ok = close and monotone and gaps_ok and iters <= 50
    meta = cfg.meta() | {"oracle_cost": opt.cost, "grid_bias": bias}
    rows = [(h.iter, h.cost, h.stderr, h.fw_gap, h.theta, h.mp_residual) for h in state.history]
    art = {"c08_optimizer_history.csv": csv_text(("iter", "cost", "stderr", "fw_gap", "theta", "mp_residual"), rows, meta)}
    return CriterionResult(8, "Frank-Wolfe reaches the oracle cost", ok,
                           f"final {final.cost:.5f} vs oracle {opt.cost:.5f} (allowance {bias + 3 * final.stderr:.5f}); "
                           f"monotone={monotone} gaps>=0={gaps_ok} iterations={iters}", art)


def chattering_stability(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    rs = tuple(cfg.refinements)
    fine = generate_noise(grid.refine(rs[-1]), cfg.paths, 1, cfg.seed + 9, workers=cfg.workers)
    pts = actions.points[:, 0]
    w = np.zeros((grid.steps, actions.size))
    w[:, int(np.argmin(np.abs(pts + 1)))] = 0.5
    w[:, int(np.argmin(np.abs(pts - 1)))] = 0.5
    q = RelaxedControl(w, actions)
    table = stability_check(problem, q, rs, fine, basis, batches=cfg.batches)
    mono = {c: table.monotone(c) for c in ("dx2", "dy2", "dz2", "cost_gap")}
    # Dirac fixed point: a strict control chattered at any level is itself
    rng = np.random.default_rng(cfg.seed + 9)
    dirac = dirac_embed(StrictControl(rng.integers(0, actions.size, size=grid.steps), actions))
    dtab = stability_check(problem, dirac, rs, fine.subset(min(cfg.paths, 2000)), basis)
    dirac_zero = all(np.all(dtab.column(c) == 0.0) for c in ("dx2", "dy2", "dz2", "cost_gap"))
    # occupation frequencies on the two-point control and on random relaxed controls
    freq_ok = all(table.freq_error[j] <= 1.0 / r for j, r in enumerate(rs))
    for _ in range(5):
        rq = _random_relaxed(rng, actions, grid.steps)
        freq_ok &= all(frequency_error(rq, chatter_project(rq, r), r) <= 1.0 / r for r in rs)
    ok = all(mono.values()) and dirac_zero and freq_ok
    bad = [c for c, v in mono.items() if not v]
    art = {"c09_stability.csv": with_header(table.to_csv(), cfg.meta()),
           "c09_stability_dirac.csv": with_header(dtab.to_csv(), cfg.meta())}
    return CriterionResult(9, "chattering stability", ok,
                           f"non-monotone columns {bad or 'none'}; Dirac gaps zero={dirac_zero}; "
                           f"frequency error within 1/r={freq_ok}; r=16 gaps dx2={table.dx2[-1]:.4g} cost={table.cost_gap[-1]:.4g}", art)


def value_equality(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions = builtin("bang_bang")
    grid = TimeGrid(cfg.horizon, cfg.bang_steps)
    basis = RegressionBasis(cfg.degree)
    conf = OptimizerConfig(paths=cfg.paths, seed=cfg.seed + 1000, max_iters=cfg.fw_iters, basis=basis, workers=cfg.workers)
    mu, _, _ = optimize(problem, RelaxedControl.uniform(actions, grid.steps), grid, conf)
    noise = _noise(cfg, grid, cfg.paths, 10)
    vg = value_gap(problem, actions, mu, noise, basis)
    bias = 0.0
    if not mu.is_dirac():
        r = cfg.refinements[-1]
        fine = generate_noise(grid.refine(r), cfg.paths, 1, cfg.seed + 11, workers=cfg.workers)
        bias = float(stability_check(problem, mu, [r], fine, basis).cost_gap[-1])
    ok = vg.exhaustive and vg.gap <= bias + 3 * vg.gap_stderr
    rows = [("strict_min", vg.strict_min, vg.strict_stderr), ("relaxed", vg.relaxed_value, vg.relaxed_stderr),
            ("gap", vg.gap, vg.gap_stderr), ("chattering_bias", bias, 0.0)]
    meta = cfg.meta() | {"enumerated": vg.enumerated, "strict_argmin": " ".join(map(str, vg.strict_argmin))}
    art = {"c10_value_gap.csv": csv_text(("quantity", "value", "stderr"), rows, meta)}
    return CriterionResult(10, "strict and relaxed values coincide", ok,
                           f"gap {vg.gap:.4g} vs allowance {bias + 3 * vg.gap_stderr:.4g} over {vg.enumerated} strict controls", art)


def sufficiency(cfg: AcceptanceConfig) -> CriterionResult:
    problem, actions, grid, basis = _setup(cfg)
    noise = _noise(cfg, grid, cfg.paths, 12)
    _, mu = _oracle_control(cfg, actions, grid)
    sol = solve_paths(problem, mu, noise, basis)
    adj = solve_adjoint(problem, mu, sol, noise, basis)
    pre = mp_residual(problem, mu, sol, adj)
    eps = _grid_bound(actions) + 3 * float(pre.stderr.max())
    good = check_sufficiency(problem, mu, sol, adj, eps, seed=cfg.seed)
    QT = LQParams().QT
    mutant = problem.replace(g=lambda x: -0.5 * QT * x[:, 0] ** 2, g_x=lambda x: -QT * x, name="concave_terminal")
    sol_m = solve_paths(mutant, mu, noise, basis)
    adj_m = solve_adjoint(mutant, mu, sol_m, noise, basis)
    bad = check_sufficiency(mutant, mu, sol_m, adj_m, eps, seed=cfg.seed)
    ok = good.holds and not bad.convex_g
    rows = [("lq", int(good.convex_g), int(good.convex_h), int(good.convex_H), good.mp.global_residual, int(good.holds)),
            ("concave_terminal", int(bad.convex_g), int(bad.convex_h), int(bad.convex_H), bad.mp.global_residual, int(bad.holds))]
    art = {"c11_sufficiency.csv": csv_text(("problem", "convex_g", "convex_h", "convex_H", "mp_residual", "certificate"),
                                           rows, cfg.meta() | {"eps": eps})}
    return CriterionResult(11, "sufficiency certificate", ok,
                           f"LQ certificate holds={good.holds}; concave mutant rejected={not bad.convex_g}", art)


CRITERIA: dict[int, Callable[[AcceptanceConfig], CriterionResult]] = {
    1: dirac_collapse, 2: adjoint_boundaries, 3: adjoint_vs_riccati, 4: duality, 5: directional,
    6: convergence, 7: maximum_principle, 8: optimizer_convergence, 9: chattering_stability,
    10: value_equality, 11: sufficiency,
}


def run_suite(cfg: AcceptanceConfig, numbers=None, progress: Callable[[CriterionResult], None] | None = None) -> list[CriterionResult]:
    out = []
    for n in (numbers or sorted(CRITERIA)):
        res = CRITERIA[n](cfg)
        out.append(res)
        if progress:
            progress(res)
    return out


def suite_artifacts(results: list[CriterionResult]) -> dict:
    arts = {}
    for r in results:
        arts.update(r.artifacts)
    arts["summary.txt"] = "\n".join(r.line() for r in results) + "\n"
    return arts


def determinism(cfg: AcceptanceConfig) -> CriterionResult:
    """Replay criteria 1-11 at reduced scale: twice with one worker and once with eight."""
    small = cfg.reduced()
    replayed = range(1, 12)
    first = suite_artifacts(run_suite(replace(small, workers=1), replayed))
    second = suite_artifacts(run_suite(replace(small, workers=1), replayed))
    wide = suite_artifacts(run_suite(replace(small, workers=8), replayed))
    same_replay = first == second
    same_workers = first == wide
    diff = sorted(k for k in first if first.get(k) != second.get(k) or first.get(k) != wide.get(k))
    rows = [(name, int(first[name] == second.get(name)), int(first[name] == wide.get(name))) for name in sorted(first)]
    art = {"c12_determinism.csv": csv_text(("artifact", "replay_identical", "workers_identical"), rows, small.meta())}
    return CriterionResult(12, "byte-identical replay", same_replay and same_workers,
                           f"replay identical={same_replay}; 1 vs 8 workers identical={same_workers}; differing={diff or 'none'}", art)


CRITERIA[12] = determinism

NAMES = {n: f.__name__ for n, f in CRITERIA.items()}
