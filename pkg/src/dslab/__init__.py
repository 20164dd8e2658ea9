"""Numerical laboratory for distillation scaling theory and difficulty-corrected matching."""

__version__ = "0.1.0"
