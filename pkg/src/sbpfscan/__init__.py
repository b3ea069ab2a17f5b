"""Symbolic-execution vulnerability scanner for sBPF programs."""

__version__ = "0.1.0"
