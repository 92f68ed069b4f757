"""Crandall-Liggett solver for weighted nonlinear Fokker-Planck equations."""

__version__ = "0.1.0"
