"""Stochastic many-measurement DC-resistivity inversion with data completion.

Library layout:

- :mod:`dcinv.grid` - uniform tensor grids and boundary segments
- :mod:`dcinv.transfer` - model-to-conductivity transfer functions
- :mod:`dcinv.forward` - operator assembly, solves, sensitivities
- :mod:`dcinv.estimators` - weight sampling and stochastic misfit estimates
- :mod:`dcinv.completion` - boundary data completion to shared receivers
- :mod:`dcinv.inversion` - the adaptive stabilized Gauss-Newton driver
- :mod:`dcinv.harness` - synthetic experiments, end-to-end runs
- :mod:`dcinv.cli` - the ``dcinv`` command line
"""

from .grid import Grid, BoundarySegment, build_grid, segment_interior_nodes
from .transfer import TransferFunction, bounds_transfer, level_set_transfer, psi, psi_prime
from .forward import (
    DiscreteOperator,
    ExperimentSet,
    ForwardResiduals,
    SolveCounter,
    SolverError,
    assemble,
    make_dipole_source,
    predict,
    solve,
    solve_many,
    ss_aggregate,
)
from .estimators import WeightMatrix, draw_weights, misfit_estimate, misfit_full
from .completion import (
    CompletionError,
    CompletionResult,
    build_patch,
    choose_lambda,
    complete_all,
    complete_one,
    surface_operator,
)
from .inversion import RunLog, StagnationError, VariantConfig, gn_step, run
from .rng import RngHub

__version__ = "0.1.0"

__all__ = [
    "Grid", "BoundarySegment", "build_grid", "segment_interior_nodes",
    "TransferFunction", "bounds_transfer", "level_set_transfer", "psi", "psi_prime",
    "DiscreteOperator", "ExperimentSet", "ForwardResiduals", "SolveCounter",
    "SolverError", "assemble", "make_dipole_source", "predict", "solve",
    "solve_many", "ss_aggregate",
    "WeightMatrix", "draw_weights", "misfit_estimate", "misfit_full",
    "CompletionError", "CompletionResult", "build_patch", "choose_lambda",
    "complete_all", "complete_one", "surface_operator",
    "RunLog", "StagnationError", "VariantConfig", "gn_step", "run",
    "RngHub",
]
