"""Causal identification on collider DAGs and ReI-regularized VAEs."""

__version__ = "0.1.0"
