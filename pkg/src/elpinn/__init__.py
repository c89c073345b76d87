"""Neural solvers for optimal control via the Euler-Lagrange conditions."""

__version__ = "0.1.0"
