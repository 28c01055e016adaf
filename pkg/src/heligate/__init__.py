"""Simulation of electrode-gated two-electron qubit gates on helium."""

__version__ = "0.1.0"
