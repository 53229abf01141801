"""Numerical laboratory for the homogeneous non-cutoff Boltzmann equation with hard potentials."""

__version__ = "0.1.0"
