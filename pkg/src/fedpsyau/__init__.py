"""Federated micro-expression recognition with AU-graph priors, on a numpy autodiff core."""

__version__ = "0.1.0"
