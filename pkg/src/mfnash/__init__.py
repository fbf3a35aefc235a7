"""Monte Carlo tools for equilibrium strategies of mean-field control problems and LQG games."""

__version__ = "0.1.0"
