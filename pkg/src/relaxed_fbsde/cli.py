"""Command-line driver.

Every subcommand reads an optional flat ``key = value`` config file, applies
command-line overrides, runs one experiment and writes CSV artifacts plus a
``summary.txt`` into ``--out``.  Exit status: 0 pass, 1 configuration error,
2 criterion failure, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import acceptance
from .adjoint import solve_adjoint
from .bsde import RegressionBasis, cost, solve_paths
from .builtins import BANG_BANG_DEFAULTS, CATALOG, LQParams, builtin
from .chattering import stability_check, value_gap
from .hamiltonian import mp_residual
from .lq_oracle import grid_bias_bound, grid_mix, optimal_open_loop, optimal_relaxed_two_point
from .noise import generate_noise
from .optimizer import OptimizerConfig, fw_direction, optimize
from .problem import NonFiniteCoefficientError, RelaxedControl, TimeGrid
from .report import csv_text, fmt, with_header, write_artifacts
from .sde import NumericalAbort
from .variational import (convergence_probe, hamiltonian_difference, solve_variational,
                          variational_inequality_value)

EXIT_PASS, EXIT_CONFIG, EXIT_FAIL, EXIT_ABORT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "lq"
    horizon: float = 1.0
    steps: int = 50
    paths: int = 10_000
    seed: int = 2024
    degree: int = 2
    grid_lower: float = -2.0
    grid_upper: float = 2.0
    grid_count: int = 21
    control: str = "uniform"
    tolerance: Optional[float] = None
    theta_schedule: str = "0.2 0.1 0.05 0.025"
    refinements: str = "1 2 4 8 16"
    max_iters: int = 50
    batches: int = 10
    save_paths: int = 10
    workers: int = 1
    params: dict = field(default_factory=dict)

    def meta(self, command: str) -> dict:
        d = asdict(self)
        d.pop("workers")
        params = d.pop("params")
        d["tolerance"] = "default" if self.tolerance is None else self.tolerance
        d.update({f"param.{k}": v for k, v in sorted(params.items())})
        d["command"] = command
        return d

    def thetas(self) -> list[float]:
        try:
            vals = [float(v) for v in self.theta_schedule.replace(",", " ").split()]
        except ValueError as exc:
            raise ConfigError(f"bad theta schedule {self.theta_schedule!r}") from exc
        if not vals or any(not 0 < v <= 1 for v in vals) or any(b >= a for a, b in zip(vals, vals[1:])):
            raise ConfigError("theta schedule must be strictly decreasing values in (0, 1]")
        return vals

    def refinement_levels(self) -> list[int]:
        try:
            vals = [int(v) for v in self.refinements.replace(",", " ").split()]
        except ValueError as exc:
            raise ConfigError(f"bad refinement list {self.refinements!r}") from exc
        if not vals or vals[0] < 1 or any(b <= a for a, b in zip(vals, vals[1:])) or any(vals[-1] % r for r in vals):
            raise ConfigError("refinements must be increasing positive integers dividing the largest one")
        return vals

    def validate(self) -> None:
        if self.problem not in CATALOG:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {', '.join(CATALOG)}")
        if self.steps < 1 or self.paths < 2 or self.horizon <= 0:
            raise ConfigError("need steps >= 1, paths >= 2 and a positive horizon")
        if self.degree < 0 or self.grid_count < 2 or self.grid_upper <= self.grid_lower:
            raise ConfigError("need degree >= 0, grid_count >= 2 and grid_upper > grid_lower")
        if self.workers < 1 or self.batches < 1 or self.max_iters < 0:
            raise ConfigError("workers and batches must be >= 1, max_iters >= 0")
        known = {f.name for f in fields(LQParams)}
        unknown = set(self.params) - known
        if unknown:
            raise ConfigError(f"unknown parameters {sorted(unknown)}")
        self.thetas()
        self.refinement_levels()


_SCALARS = {f.name: f.type for f in fields(ExperimentConfig) if f.name != "params"}


def _coerce(key: str, raw: str):
    kind = _SCALARS[key]
    try:
        if "Optional" in str(kind):
            return None if raw.strip().lower() in ("", "none", "default") else float(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path: Optional[str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[experiment]\n" + text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    params = {}
    updates = {}
    lq_fields = {f.name for f in fields(LQParams)}
    for key, raw in parser["experiment"].items():
        key = key.strip().replace("-", "_")
        if key in _SCALARS:
            updates[key] = _coerce(key, raw)
        elif key in lq_fields:
            try:
                params[key] = float(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(cfg, params=params, **updates)


# ------------------------------------------------------------------ setup

@dataclass
class Setup:
    cfg: ExperimentConfig
    problem: object
    actions: object
    grid: TimeGrid
    basis: RegressionBasis


def _setup(cfg: ExperimentConfig) -> Setup:
    gridspec = {} if cfg.problem == "bang_bang" else {"lower": cfg.grid_lower, "upper": cfg.grid_upper, "count": cfg.grid_count}
    problem, actions = builtin(cfg.problem, cfg.params, gridspec)
    return Setup(cfg, problem, actions, TimeGrid(cfg.horizon, cfg.steps), RegressionBasis(cfg.degree))


def _params(cfg: ExperimentConfig) -> LQParams:
    base = BANG_BANG_DEFAULTS if cfg.problem == "bang_bang" else LQParams()
    return base.updated(**cfg.params)


def _control(s: Setup) -> RelaxedControl:
    spec = s.cfg.control.strip()
    K, N = s.actions.size, s.grid.steps
    if spec == "uniform":
        return RelaxedControl.uniform(s.actions, N)
    if spec == "oracle":
        if s.cfg.problem == "forward_only":
            raise ConfigError("the oracle control is defined for the lq and bang_bang problems")
        if s.cfg.problem == "bang_bang":
            opt = optimal_relaxed_two_point(_params(s.cfg), s.grid)
        else:
            opt = optimal_open_loop(_params(s.cfg), s.grid, float(s.actions.lower[0]), float(s.actions.upper[0]))
        return grid_mix(opt.actions, s.actions)
    kind, _, arg = spec.partition(":")
    w = np.zeros((N, K))
    try:
        if kind == "dirac":
            j = int(arg)
            if not 0 <= j < K:
                raise ConfigError(f"dirac index must lie in [0, {K})")
            w[:, j] = 1.0
            return RelaxedControl(w, s.actions)
        if kind == "mix":
            targets = [float(v) for v in arg.split(",")]
            pts = s.actions.points[:, 0]
            for a in targets:
                w[:, int(np.argmin(np.abs(pts - a)))] += 1.0 / len(targets)
            return RelaxedControl(w, s.actions)
    except ValueError as exc:
        raise ConfigError(f"bad control {spec!r}") from exc
    raise ConfigError(f"unknown control {spec!r}; use uniform, oracle, dirac:J or mix:a,b")


def _noise(s: Setup, grid: Optional[TimeGrid] = None, offset: int = 0):
    return generate_noise(grid or s.grid, s.cfg.paths, s.problem.dims.d, s.cfg.seed + offset,
                          initial_dim=s.problem.initial_dim, workers=s.cfg.workers)


def _mp_tolerance(s: Setup, stderr: float) -> float:
    if s.cfg.tolerance is not None:
        return s.cfg.tolerance
    if s.cfg.problem == "bang_bang":
        return 3 * stderr
    h = s.actions.spacing()
    return 0.5 * _params(s.cfg).R * (h / 2) ** 2 + 3 * stderr


@dataclass
class Outcome:
    passed: bool
    lines: list
    artifacts: dict


# ------------------------------------------------------------- subcommands

def cmd_simulate(s: Setup) -> Outcome:
    mu = _control(s)
    noise = _noise(s)
    sol = solve_paths(s.problem, mu, noise, s.basis)
    c = cost(s.problem, mu, sol)
    meta = s.cfg.meta("simulate")
    keep = min(s.cfg.save_paths, noise.paths)
    n, m = s.problem.dims.n, s.problem.dims.m
    cols = ("path", "step", "t") + tuple(f"x{j}" for j in range(n)) + tuple(f"y{j}" for j in range(m))
    rows = ((p, i, s.grid.nodes[i], *sol.x[p, i], *sol.y[p, i]) for p in range(keep) for i in range(s.grid.steps + 1))
    arts = {"paths.csv": csv_text(cols, rows, meta),
            "cost.csv": csv_text(("cost", "stderr"), [(c.value, c.stderr)], meta)}
    return Outcome(True, [f"cost {fmt(c.value)} stderr {fmt(c.stderr)}"], arts)


def cmd_adjoint(s: Setup) -> Outcome:
    mu = _control(s)
    noise = _noise(s)
    sol = solve_paths(s.problem, mu, noise, s.basis)
    adj = solve_adjoint(s.problem, mu, sol, noise, s.basis)
    k0 = s.problem.h_y(sol.y[:, 0])
    xN = sol.x[:, -1]
    pT = s.problem.g_x(xN) + np.einsum("mj,mjk->mk", adj.k[:, -1], s.problem.phi_x(xN))
    ok_k, ok_p = bool(np.array_equal(adj.k[:, 0], k0)), bool(np.array_equal(adj.p[:, -1], pT))
    N = s.grid.steps
    kbar, pbar = adj.k.mean(axis=0), adj.p.mean(axis=0)
    Pbar = adj.P.reshape(adj.P.shape[0], N, -1).mean(axis=0)
    cols = ("step", "t") + tuple(f"k{j}" for j in range(kbar.shape[1])) + tuple(f"p{j}" for j in range(pbar.shape[1])) \
        + tuple(f"P{j}" for j in range(Pbar.shape[1]))
    rows = [(i, s.grid.nodes[i], *kbar[i], *pbar[i], *(Pbar[i] if i < N else [float("nan")] * Pbar.shape[1])) for i in range(N + 1)]
    arts = {"adjoint_means.csv": csv_text(cols, rows, s.cfg.meta("adjoint"))}
    lines = [f"k0 = h_y(y0) on every path: {ok_k}", f"pT = g_x + phi_x^T kT on every path: {ok_p}",
             f"flagged regression steps: {len(adj.diagnostics and [d for d in adj.diagnostics if d.rank_deficient])}"]
    return Outcome(ok_k and ok_p, lines, arts)


def cmd_mp_check(s: Setup) -> Outcome:
    mu = _control(s)
    noise = _noise(s)
    sol = solve_paths(s.problem, mu, noise, s.basis)
    rep = mp_residual(s.problem, mu, sol, solve_adjoint(s.problem, mu, sol, noise, s.basis))
    tol = _mp_tolerance(s, rep.global_stderr)
    ok = rep.satisfies(tol)
    arts = {"mp.csv": csv_text(rep.COLUMNS, rep.rows(), s.cfg.meta("mp-check") | {"effective_tolerance": tol})}
    return Outcome(ok, [f"global MP residual {fmt(rep.global_residual)} at step {rep.worst_step} (tolerance {fmt(tol)})",
                        f"Frank-Wolfe gap {fmt(rep.fw_gap)} stderr {fmt(rep.fw_stderr)}"], arts)


def cmd_optimize(s: Setup) -> Outcome:
    conf = OptimizerConfig(paths=s.cfg.paths, seed=s.cfg.seed, max_iters=s.cfg.max_iters, basis=s.basis,
                           workers=s.cfg.workers, tolerance=s.cfg.tolerance if s.cfg.tolerance is not None else 1e-4)
    mu, rep, state = optimize(s.problem, _control(s), s.grid, conf)
    meta = s.cfg.meta("optimize")
    tol = _mp_tolerance(s, rep.global_stderr)
    ok = rep.satisfies(tol)
    hist = [(h.iter, h.cost, h.stderr, h.fw_gap, h.theta, h.mp_residual) for h in state.history]
    wcols = ("step", "t") + tuple(f"w{j}" for j in range(s.actions.size))
    arts = {"history.csv": csv_text(("iter", "cost", "stderr", "fw_gap", "theta", "mp_residual"), hist, meta),
            "mp.csv": csv_text(rep.COLUMNS, rep.rows(), meta | {"effective_tolerance": tol}),
            "control.csv": csv_text(wcols, ((i, s.grid.nodes[i], *mu.weights[i]) for i in range(s.grid.steps)), meta)}
    last = state.history[-1]
    lines = [f"final cost {fmt(last.cost)} stderr {fmt(last.stderr)} after {last.iter} iterations",
             f"converged={state.converged} stalled={state.stalled}",
             f"final MP residual {fmt(rep.global_residual)} (tolerance {fmt(tol)})"]
    if s.cfg.problem == "lq":
        opt = optimal_open_loop(_params(s.cfg), s.grid, float(s.actions.lower[0]), float(s.actions.upper[0]))
        lines.append(f"oracle open-loop cost {fmt(opt.cost)}; grid bias bound {fmt(grid_bias_bound(_params(s.cfg), s.actions, s.grid.horizon))}")
    return Outcome(ok, lines, arts)


def cmd_variational(s: Setup) -> Outcome:
    mu = _control(s)
    noise = _noise(s)
    sol = solve_paths(s.problem, mu, noise, s.basis)
    adj = solve_adjoint(s.problem, mu, sol, noise, s.basis)
    q = fw_direction(mp_residual(s.problem, mu, sol, adj), mu)
    var = solve_variational(s.problem, mu, q, sol, noise, s.basis)
    d = variational_inequality_value(s.problem, sol, var)
    h = hamiltonian_difference(s.problem, mu, q, sol, adj)
    se = float(np.hypot(d.stderr, h.stderr))
    z = abs(d.value - h.value) / se if se > 0 else (0.0 if d.value == h.value else float("inf"))
    table = convergence_probe(s.problem, mu, q, s.cfg.thetas(), noise, s.basis)
    mono = all(table.monotone(c) for c in table.COLUMNS[1:])
    meta = s.cfg.meta("variational")
    arts = {"variational.csv": csv_text(("delta", "delta_stderr", "hamiltonian_diff", "hamiltonian_stderr", "z"),
                                        [(d.value, d.stderr, h.value, h.stderr, z)], meta),
            "convergence.csv": with_header(table.to_csv(), meta)}
    lines = [f"delta {fmt(d.value)} stderr {fmt(d.stderr)} toward the Hamiltonian-minimizing direction",
             f"adjoint Hamiltonian difference {fmt(h.value)} ({z:.2f} combined stderr apart)",
             f"convergence columns monotone: {mono}; x-gap slope {table.slope():.3f}"]
    return Outcome(z <= 3.0 and mono, lines, arts)


def cmd_chatter(s: Setup) -> Outcome:
    q = _control(s)
    rs = s.cfg.refinement_levels()
    fine = _noise(s, s.grid.refine(rs[-1]))
    table = stability_check(s.problem, q, rs, fine, s.basis, batches=s.cfg.batches)
    mono = {c: table.monotone(c) for c in ("dx2", "dy2", "dz2", "cost_gap")}
    freq = all(table.freq_error[j] <= 1.0 / r for j, r in enumerate(rs))
    arts = {"stability.csv": with_header(table.to_csv(), s.cfg.meta("chatter"))}
    lines = [f"{c} monotone: {v}" for c, v in mono.items()] + [f"occupation frequency within 1/r: {freq}"]
    return Outcome(all(mono.values()) and freq, lines, arts)


def cmd_value_gap(s: Setup) -> Outcome:
    conf = OptimizerConfig(paths=s.cfg.paths, seed=s.cfg.seed, max_iters=s.cfg.max_iters, basis=s.basis, workers=s.cfg.workers)
    mu, _, _ = optimize(s.problem, RelaxedControl.uniform(s.actions, s.grid.steps), s.grid, conf)
    vg = value_gap(s.problem, s.actions, mu, _noise(s, offset=1), s.basis)
    bias = 0.0
    if not mu.is_dirac():
        r = s.cfg.refinement_levels()[-1]
        bias = float(stability_check(s.problem, mu, [r], _noise(s, s.grid.refine(r), 2), s.basis).cost_gap[-1])
    allowance = bias + 3 * vg.gap_stderr if s.cfg.tolerance is None else s.cfg.tolerance
    ok = vg.gap <= allowance
    rows = [("strict_min", vg.strict_min, vg.strict_stderr), ("relaxed", vg.relaxed_value, vg.relaxed_stderr),
            ("gap", vg.gap, vg.gap_stderr), ("chattering_bias", bias, 0.0)]
    meta = s.cfg.meta("value-gap") | {"enumerated": vg.enumerated, "exhaustive": vg.exhaustive}
    arts = {"value_gap.csv": csv_text(("quantity", "value", "stderr"), rows, meta)}
    return Outcome(ok, [f"strict minimum {fmt(vg.strict_min)} over {vg.enumerated} controls (exhaustive={vg.exhaustive})",
                        f"relaxed optimizer value {fmt(vg.relaxed_value)}; gap {fmt(vg.gap)} allowance {fmt(allowance)}"], arts)


def cmd_verify_all(s: Setup, numbers=None) -> Outcome:
    cfg = s.cfg
    acc = acceptance.AcceptanceConfig(seed=cfg.seed, paths=cfg.paths, paths_large=10 * cfg.paths, steps=cfg.steps,
                                      horizon=cfg.horizon, degree=cfg.degree, workers=cfg.workers,
                                      fw_iters=cfg.max_iters, refinements=tuple(cfg.refinement_levels()),
                                      batches=cfg.batches)
    results = acceptance.run_suite(acc, numbers, progress=lambda r: print(r.line(), flush=True))
    arts = acceptance.suite_artifacts(results)
    del arts["summary.txt"]
    return Outcome(all(r.passed for r in results), [r.line() for r in results], arts)


COMMANDS = {
    "simulate": cmd_simulate, "adjoint": cmd_adjoint, "mp-check": cmd_mp_check, "optimize": cmd_optimize,
    "variational": cmd_variational, "chatter": cmd_chatter, "value-gap": cmd_value_gap, "verify-all": cmd_verify_all,
}


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not criterion failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


_HELP = {
    "simulate": "simulate the forward-backward system and estimate the cost",
    "adjoint": "solve the adjoints and check their boundary values",
    "mp-check": "per-step Hamiltonian gap of the chosen control",
    "optimize": "Frank-Wolfe over relaxed controls",
    "variational": "variational equations, duality check and perturbation convergence table",
    "chatter": "chattering stability table for the chosen relaxed control",
    "value-gap": "strict versus relaxed optimal value by enumeration",
    "verify-all": "run the acceptance criteria",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value file")
    common.add_argument("--seed", type=int)
    common.add_argument("--paths", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--out", default="out", help="artifact directory (default: out)")
    common.add_argument("--tolerance", type=float)
    common.add_argument("--workers", type=int, help="threads for noise generation; never changes results")
    common.add_argument("--problem", choices=CATALOG)
    common.add_argument("--control", help="uniform | oracle | dirac:J | mix:a,b")
    parser = _Parser(prog="relaxed-fbsde", description="Relaxed and strict FBSDE control experiments.",
                     epilog="exit status: 0 pass, 1 configuration error, 2 criterion failure, 3 numerical abort")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=_HELP[name])
        if name in ("variational",):
            p.add_argument("--theta-schedule", help="decreasing values in (0, 1], e.g. '0.2 0.1 0.05'")
        if name in ("chatter", "value-gap", "verify-all"):
            p.add_argument("--refinements", help="increasing slot counts, e.g. '1 2 4 8 16'")
        if name in ("optimize", "value-gap", "verify-all"):
            p.add_argument("--max-iters", type=int)
        if name == "verify-all":
            p.add_argument("--criteria", help="comma-separated subset of criterion numbers (default: all 12)")
    return parser


def _apply_overrides(cfg: ExperimentConfig, ns: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    for key in ("seed", "paths", "steps", "tolerance", "workers", "problem", "control", "theta_schedule", "refinements", "max_iters"):
        val = getattr(ns, key, None)
        if val is not None:
            changes[key] = val
    return replace(cfg, **changes)


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(ns.config), ns)
        cfg.validate()
        setup = _setup(cfg)
        numbers = None
        if ns.command == "verify-all" and ns.criteria:
            try:
                numbers = sorted({int(v) for v in ns.criteria.split(",")})
            except ValueError as exc:
                raise ConfigError(f"bad criterion list {ns.criteria!r}") from exc
            if not set(numbers) <= set(acceptance.CRITERIA):
                raise ConfigError("criteria are numbered 1 to 12")
        run = COMMANDS[ns.command]
        outcome = run(setup, numbers) if ns.command == "verify-all" else run(setup)
    except (ConfigError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, NonFiniteCoefficientError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    status = "PASS" if outcome.passed else "FAIL"
    summary = "\n".join([f"{ns.command}: {status}"] + outcome.lines) + "\n"
    write_artifacts(Path(ns.out), outcome.artifacts | {"summary.txt": summary})
    print(summary, end="")
    return EXIT_PASS if outcome.passed else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
