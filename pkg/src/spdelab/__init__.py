"""Numerical laboratory for degenerate stochastic evolution equations

    d(B u) + A(u) dt = f dt + B Phi dW

with a possibly singular, positive semidefinite B.
"""
from .bform import BForm, BOrthonormalBasis, b_gram_schmidt, b_parseval, bzz_pairing
from .integrator import PathResult, Problem, SolverConfig, mc_run, picard_ball_solve, solve_path
from .itolab import (
    ItoLedger,
    energy_inequality_check,
    expected_energy_check,
    pathwise_ledger,
    sup_energy_diagnostic,
)
from .noise import NoiseModel, Partition, dyadic_partitions, ito_integral, quadratic_variation

__version__ = "0.1.0"
