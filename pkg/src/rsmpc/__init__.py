"""Risk-sensitive model predictive control for linear-convex problems."""

__version__ = "0.1.0"
