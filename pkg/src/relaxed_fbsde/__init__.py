"""Relaxed and strict control of forward-backward SDEs.

The usual pipeline: build a problem (or take a built-in), draw a
``NoiseEnsemble``, solve the forward-backward system with ``solve_paths``,
then the adjoints, and inspect the Hamiltonian gap or run the optimizer.
"""

from .adjoint import AdjointProcesses, solve_adjoint
from .bsde import CostEstimate, RegressionBasis, cost, solve_backward, solve_linear_bsde, solve_paths
from .builtins import CATALOG, LQParams, builtin, lq_problem
from .chattering import chatter_project, stability_check, value_gap
from .hamiltonian import (HamiltonianContext, check_sufficiency, eval_hamiltonian, eval_relaxed_hamiltonian,
                          minimize_hamiltonian, mp_residual)
from .noise import NoiseEnsemble, generate_noise
from .optimizer import OptimizerConfig, optimize
from .problem import (ActionGrid, DimensionSignature, FbsdeProblem, NonFiniteCoefficientError, RelaxedControl,
                      StrictControl, TimeGrid, dirac_embed, nearest_dirac, validate_problem)
from .sde import NumericalAbort, PathEnsemble, simulate_forward
from .variational import (convergence_probe, directional_derivative, hamiltonian_difference, solve_variational,
                          variational_inequality_value)

__version__ = "0.1.0"

__all__ = [
    "ActionGrid", "AdjointProcesses", "CATALOG", "CostEstimate", "DimensionSignature", "FbsdeProblem",
    "HamiltonianContext", "LQParams", "NoiseEnsemble", "NonFiniteCoefficientError", "NumericalAbort",
    "OptimizerConfig", "PathEnsemble", "RegressionBasis", "RelaxedControl", "StrictControl", "TimeGrid",
    "builtin", "chatter_project", "check_sufficiency", "convergence_probe", "cost", "dirac_embed",
    "directional_derivative", "eval_hamiltonian", "eval_relaxed_hamiltonian", "generate_noise",
    "hamiltonian_difference", "lq_problem", "minimize_hamiltonian", "mp_residual", "nearest_dirac", "optimize",
    "simulate_forward", "solve_adjoint", "solve_backward", "solve_linear_bsde", "solve_paths",
    "solve_variational", "stability_check", "validate_problem", "value_gap", "variational_inequality_value",
]
