"""Optimal control of the superfluid to Mott-insulator transfer in a Bose-Hubbard chain.

Modules
-------
lattice
    Band structure, Wannier functions and the depth to ``U/J_x`` map.
fock
    Exact diagonalization oracles on the fixed-particle Fock basis.
mps
    Matrix product states with truncated SVD and canonical forms.
tebd
    Split-operator time steps and imaginary-time ground states on MPS.
grape
    Costs, exact Trotterized gradients and the optimizer.
observables
    Fidelity, density of defects, rescaled variance.
runner, cli
    Configuration, batches and the command line.
"""

__version__ = "0.1.0"
