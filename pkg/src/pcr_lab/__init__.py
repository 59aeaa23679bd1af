"""Probabilistic conflict resolution between plasticity and stability gradients in GRPO."""

__version__ = "0.1.0"
