"""Numerical laboratory for transfer cocycles of half-line Jacobi operators.

Modules:
    core         2x2 cocycle kernel, fast constant-step powers
    subordinacy  L-norms, boundary pairs, subordinacy exponents
    ac_criterion Cesaro transfer-norm test, membership sums
    randpert     perturbation models, sampling, probabilistic checks
    variation    correction-matrix factorization, Neumann amplitudes
    singular     singular-spectrum stability diagnostics
    sparse       geometric bump potentials and decay thresholds
    harness      configuration, orchestration, CLI
"""

__version__ = "0.1.0"
