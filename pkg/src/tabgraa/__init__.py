"""Reward-guided iterative post-training for tabular language models."""

__version__ = "0.1.0"
