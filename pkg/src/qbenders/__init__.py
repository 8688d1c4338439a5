"""Benders decomposition for mixed binary programs with QUBO-compiled master problems."""

__version__ = "0.1.0"
