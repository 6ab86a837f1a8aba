"""Generalized planning toolkit: GNN policies trained with PPO and deployed
inside policy-guided greedy best-first search."""

__version__ = "0.1.0"
