"""Additive-error low-rank approximation of implicitly defined distributed matrices."""

__version__ = "0.1.0"
